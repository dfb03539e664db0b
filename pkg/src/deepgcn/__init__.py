"""Deep graph convolutional networks on numpy: residual/dense backbones, dilated k-NN, own autodiff."""

__version__ = "0.1.0"
