"""Binary segmentation engine: bit-packed XNOR/popcount convolution,
sign binarization with per-channel scaling, straight-through-estimator
training, a compact encoder/bottleneck/decoder road-segmentation network,
complexity accounting, and a deterministic synthetic scene generator."""

__version__ = "0.1.0"
