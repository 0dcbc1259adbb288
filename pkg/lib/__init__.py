"""
TML Library

Tensor autodiff, convolution and GDC operators, the UGDC network, the
TroubleMaker Learning pipeline, verification and benchmarking.
"""
