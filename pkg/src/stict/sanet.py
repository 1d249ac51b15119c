"""Scale-aware segmentation network: a 4-stage encoder, a gated-fusion
decoder with deep supervision, a detail-attention branch, and a refiner
with top-down aggregation plus a bottom-up correction pass.

All prediction heads emit sigmoid probability maps bilinearly upsampled to
the input resolution, eight maps total: three decoder scales, the decoder
final, three refiner scales, the refiner final.
"""

from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .nn import Conv2d, ConvNormRelu, Module


@dataclass
class ModelConfig:
    channels: tuple = (16, 32, 64, 128)
    use_ffm: bool = True
    use_refiner: bool = True
    use_dam: bool = True

    def validate(self):
        if len(self.channels) != 4 or any(c < 1 for c in self.channels):
            raise ValueError(f"channels must be 4 positive extents, got {self.channels}")
        if self.use_refiner and not self.use_ffm:
            raise ValueError("refiner requires ffm")
        if self.use_dam and not self.use_refiner:
            raise ValueError("dam requires refiner")
        return self


@dataclass
class FeaturePyramid:
    """Encoder features; level i has spatial extent input/2^i."""

    levels: list  # [level1, level2, level3, level4]

    def __post_init__(self):
        if len(self.levels) != 4:
            raise ValueError("pyramid needs exactly 4 levels")

    @property
    def deepest(self):
        return self.levels[3]

    @property
    def skips(self):
        return self.levels[:3]


@dataclass
class ModelOutputs:
    """Eight sigmoid maps at input resolution."""

    d_scales: list  # o_d1..o_d3
    d_final: object
    r_scales: list  # o_r1..o_r3
    r_final: object

    def all_maps(self):
        return self.d_scales + [self.d_final] + self.r_scales + [self.r_final]


class FeatureFusion(Module):
    """Gated fusion of a coarse semantic feature into a finer one.

    h = conv(upsample2(high)), l = conv(low), a = sigmoid(conv(h + l)),
    output = a*h + a*l + l, at the low level's shape.
    """

    def __init__(self, c_high, c_low, rng, dtype=np.float32):
        super().__init__()
        self.conv_high = Conv2d(c_high, c_low, 3, rng, dtype=dtype)
        self.conv_low = Conv2d(c_low, c_low, 3, rng, dtype=dtype)
        self.conv_gate = Conv2d(c_low, c_low, 3, rng, dtype=dtype)

    def forward(self, high, low):
        if tuple(2 * e for e in high.shape[2:]) != low.shape[2:]:
            raise T.ShapeError(f"fusion: low {low.shape} must be 2x high {high.shape}")
        h = self.conv_high.forward(T.resample(high, 2, "bilinear"))
        l = self.conv_low.forward(low)
        a = T.sigmoid(self.conv_gate.forward(T.add(h, l)))
        return T.add(T.add(T.multiply(a, h), T.multiply(a, l)), l)


class SimpleFusion(Module):
    """Ablation baseline for the gated fusion: upsample + add + conv."""

    def __init__(self, c_high, c_low, rng, dtype=np.float32):
        super().__init__()
        self.proj = Conv2d(c_high, c_low, 1, rng, dtype=dtype)
        self.conv = Conv2d(c_low, c_low, 3, rng, dtype=dtype)

    def forward(self, high, low):
        up = self.proj.forward(T.resample(high, 2, "bilinear"))
        return self.conv.forward(T.add(up, low))


class DetailAttention(Module):
    """Details gated by the deepest semantics: a = sigmoid(conv(up8(highest)));
    output = a*conv(lowest) + lowest."""

    def __init__(self, c_high, c_low, rng, dtype=np.float32):
        super().__init__()
        self.conv_att = Conv2d(c_high, c_low, 3, rng, dtype=dtype)
        self.conv_low = Conv2d(c_low, c_low, 3, rng, dtype=dtype)

    def forward(self, highest, lowest):
        if tuple(8 * e for e in highest.shape[2:]) != lowest.shape[2:]:
            raise T.ShapeError(f"dam: lowest {lowest.shape} must be 8x highest {highest.shape}")
        a = T.sigmoid(self.conv_att.forward(T.resample(highest, 8, "bilinear")))
        return T.add(T.multiply(a, self.conv_low.forward(lowest)), lowest)


class SANet(Module):
    """Encoder-decoder-refiner shadow detector with deep supervision."""

    def __init__(self, config: ModelConfig, rng, dtype=np.float32):
        super().__init__()
        config.validate()
        self.config = config
        self.dtype = dtype
        c1, c2, c3, c4 = config.channels

        self.enc1a = ConvNormRelu(3, c1, rng, stride=2, dtype=dtype)
        self.enc1b = ConvNormRelu(c1, c1, rng, dtype=dtype)
        self.enc2a = ConvNormRelu(c1, c2, rng, stride=2, dtype=dtype)
        self.enc2b = ConvNormRelu(c2, c2, rng, dtype=dtype)
        self.enc3a = ConvNormRelu(c2, c3, rng, stride=2, dtype=dtype)
        self.enc3b = ConvNormRelu(c3, c3, rng, dtype=dtype)
        self.enc4a = ConvNormRelu(c3, c4, rng, stride=2, dtype=dtype)
        self.enc4b = ConvNormRelu(c4, c4, rng, dtype=dtype)

        fuse = FeatureFusion if config.use_ffm else SimpleFusion
        self.fuse3 = fuse(c4, c3, rng, dtype=dtype)
        self.fuse2 = fuse(c3, c2, rng, dtype=dtype)
        self.fuse1 = fuse(c2, c1, rng, dtype=dtype)
        self.d_head1 = Conv2d(c1, 1, 1, rng, dtype=dtype)
        self.d_head2 = Conv2d(c2, 1, 1, rng, dtype=dtype)
        self.d_head3 = Conv2d(c3, 1, 1, rng, dtype=dtype)
        self.d_final_conv = Conv2d(c1, 1, 3, rng, dtype=dtype)

        if config.use_refiner:
            self.inject = Conv2d(c1, c3, 1, rng, dtype=dtype)
            self.rfuse2 = FeatureFusion(c3, c2, rng, dtype=dtype)
            self.rfuse1 = FeatureFusion(c2, c1, rng, dtype=dtype)
            self.bu2 = Conv2d(c1, c2, 1, rng, dtype=dtype)
            self.bu3 = Conv2d(c1, c3, 1, rng, dtype=dtype)
            self.r_head1 = Conv2d(c1, 1, 1, rng, dtype=dtype)
            self.r_head2 = Conv2d(c2, 1, 1, rng, dtype=dtype)
            self.r_head3 = Conv2d(c3, 1, 1, rng, dtype=dtype)
            self.r_final_conv = Conv2d(c1, 1, 3, rng, dtype=dtype)
        if config.use_dam:
            self.dam = DetailAttention(c4, c1, rng, dtype=dtype)

    # -- forward paths -------------------------------------------------

    def encode(self, frame, domain):
        b, c, h, w = frame.shape
        if c != 3:
            raise T.ShapeError(f"encode: expected 3 input channels, got {c}")
        if h % 16 or w % 16:
            raise T.ShapeError(f"encode: extents {h}x{w} must be divisible by 16")
        x = self.enc1b.forward(self.enc1a.forward(frame, domain), domain)
        l1 = x
        x = self.enc2b.forward(self.enc2a.forward(x, domain), domain)
        l2 = x
        x = self.enc3b.forward(self.enc3a.forward(x, domain), domain)
        l3 = x
        x = self.enc4b.forward(self.enc4a.forward(x, domain), domain)
        return FeaturePyramid([l1, l2, l3, x])

    def _predict(self, head, feat, size):
        return T.resample_to(T.sigmoid(head.forward(feat)), size, "bilinear")

    def decode_from_deep(self, feature, skips, domain):
        """Run the decoder (and refiner) from the deepest-level attachment
        point; `feature` stands in for the encoder's level-4 output."""
        l1, l2, l3 = skips
        if feature.shape[2:] != tuple(e // 2 for e in l3.shape[2:]):
            raise T.ShapeError(f"decode: feature {feature.shape} does not sit below skip {l3.shape}")
        size = tuple(2 * e for e in l1.shape[2:])

        a3 = self.fuse3.forward(feature, l3)
        a2 = self.fuse2.forward(a3, l2)
        a1 = self.fuse1.forward(a2, l1)
        d_scales = [
            self._predict(self.d_head1, a1, size),
            self._predict(self.d_head2, a2, size),
            self._predict(self.d_head3, a3, size),
        ]
        d_final = self._predict(self.d_final_conv, a1, size)

        if not self.config.use_refiner:
            return ModelOutputs(d_scales, d_final, list(d_scales), d_final)

        c3r = self.inject.forward(T.resample(a1, 0.25, "bilinear"))
        shallow = self.dam.forward(feature, l1) if self.config.use_dam else l1
        b2 = self.rfuse2.forward(c3r, a2)
        b1 = self.rfuse1.forward(b2, shallow)
        d2 = T.add(b2, self.bu2.forward(T.resample(b1, 0.5, "bilinear")))
        d3 = T.add(c3r, self.bu3.forward(T.resample(b1, 0.25, "bilinear")))
        r_scales = [
            self._predict(self.r_head1, b1, size),
            self._predict(self.r_head2, d2, size),
            self._predict(self.r_head3, d3, size),
        ]
        r_final = self._predict(self.r_final_conv, b1, size)
        return ModelOutputs(d_scales, d_final, r_scales, r_final)

    def forward(self, frame, domain):
        pyr = self.encode(frame, domain)
        return self.decode_from_deep(pyr.deepest, pyr.skips, domain)
