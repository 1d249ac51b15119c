"""Semi-supervised video shadow detection at desk scale: a mean-teacher
trainer with spatial, temporal, and scale consistency over a small
scale-aware segmentation network, on a hand-rolled autodiff core."""

__version__ = "0.1.0"
