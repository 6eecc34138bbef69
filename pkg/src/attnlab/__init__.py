"""attnlab: channel-attention mechanisms on a small float64 autodiff substrate.

The package compares two ways of folding a squeezed channel descriptor back
into a convolutional trunk -- multiplicative scaling versus a learned additive
shift -- plus a per-sample kernel-mixture baseline.  It ships an analytic cost
model for parameters and multiply-adds, gradient-saturation probes, a
desk-scale CIFAR-10 training harness, an HTTP service exposing all of it, and
a CLI that drives the service.
"""

__version__ = "0.1.0"
