"""Convolutional building blocks and the hourglass residual U-Net.

The U-Net encodes with two stride-2 steps and decodes with two nearest-
neighbor upsamplings; skip connections merge through learnable adaptive
mix-up scalars instead of concatenation.  The output projection initializes
to zero so a freshly built network is the identity denoiser (zero residual).
"""

import numpy as np

from ..errors import StageContractError
from . import autodiff as ad

__all__ = ["Conv2d", "ResBlock", "AdaptiveMixup", "ResUNet", "adaptive_mixup"]


class Module:
    """Parameter registry base; subclasses append (name, Tensor) pairs."""

    def params(self):
        out = []
        for name, child in self.__dict__.items():
            if isinstance(child, ad.Tensor) and child.requires_grad:
                out.append((name, child))
            elif isinstance(child, Module):
                out.extend((f"{name}.{sub}", t) for sub, t in child.params())
            elif isinstance(child, (list, tuple)):
                for i, item in enumerate(child):
                    if isinstance(item, Module):
                        out.extend((f"{name}.{i}.{sub}", t) for sub, t in item.params())
        return out

    def zero_grad(self):
        for _, t in self.params():
            t.zero_grad()


class Conv2d(Module):
    def __init__(self, in_ch, out_ch, rng, ksize=3, stride=1, init="he"):
        fan_in = in_ch * ksize * ksize
        if init == "he":
            w = rng.standard_normal((out_ch, in_ch, ksize, ksize)) * np.sqrt(2.0 / fan_in)
        elif init == "zero":
            w = np.zeros((out_ch, in_ch, ksize, ksize))
        else:
            raise ValueError(f"unknown init {init!r}")
        self.weight = ad.Tensor(w, requires_grad=True)
        self.bias = ad.Tensor(np.zeros(out_ch), requires_grad=True)
        self.stride = stride
        self.padding = (ksize - 1) // 2

    def __call__(self, x):
        return ad.conv2d(x, self.weight, self.bias, stride=self.stride,
                         padding=self.padding)


class ResBlock(Module):
    """conv-relu-conv with identity skip, ReLU after the merge."""

    def __init__(self, channels, rng):
        self.conv1 = Conv2d(channels, channels, rng)
        self.conv2 = Conv2d(channels, channels, rng)

    def __call__(self, x):
        return ad.relu(ad.add(x, self.conv2(ad.relu(self.conv1(x)))))


def adaptive_mixup(skip, up, theta):
    """sigmoid(theta)*up + (1 - sigmoid(theta))*skip, theta learnable."""
    if skip.data.shape != up.data.shape:
        raise StageContractError(
            f"mix-up shapes differ: {skip.data.shape} vs {up.data.shape}")
    s = ad.sigmoid(theta)
    one_minus = ad.add_const(ad.neg(s), 1.0)
    return ad.add(ad.mul(s, up), ad.mul(one_minus, skip))


class AdaptiveMixup(Module):
    def __init__(self, theta0=0.0):
        self.theta = ad.Tensor(np.float64(theta0), requires_grad=True)

    def __call__(self, skip, up):
        return adaptive_mixup(skip, up, self.theta)


class ResUNet(Module):
    """Two-level hourglass denoiser emitting a single residual channel.

    widths gives the channel count per encoder level; spatial size is
    preserved for any input by reflect-padding to a multiple of 4 and
    cropping back.
    """

    def __init__(self, in_channels, rng, widths=(16, 32)):
        w0, w1 = widths
        self.in_channels = in_channels
        self.widths = tuple(widths)
        self.in_proj = Conv2d(in_channels, w0, rng)
        self.e1_down = Conv2d(w0, w0, rng, stride=2)
        self.e1_block = ResBlock(w0, rng)
        self.e2_down = Conv2d(w0, w1, rng, stride=2)
        self.e2_block = ResBlock(w1, rng)
        self.d2_block = ResBlock(w1, rng)
        self.d2_up = Conv2d(w1, w0, rng)
        self.mix2 = AdaptiveMixup()
        self.d1_block = ResBlock(w0, rng)
        self.d1_up = Conv2d(w0, w0, rng)
        self.mix1 = AdaptiveMixup()
        self.out_proj = Conv2d(w0, 1, rng, init="zero")

    def __call__(self, x):
        if x.data.ndim != 4 or x.data.shape[1] != self.in_channels:
            raise StageContractError(
                f"expected (N, {self.in_channels}, H, W) input, got {x.data.shape}")
        h, w = x.data.shape[2], x.data.shape[3]
        ph = (-h) % 4
        pw = (-w) % 4
        if ph or pw:
            x = ad.reflect_pad2d(x, (0, ph, 0, pw))
        f0 = ad.relu(self.in_proj(x))
        f1 = self.e1_block(ad.relu(self.e1_down(f0)))
        f2 = self.e2_block(ad.relu(self.e2_down(f1)))
        g2 = ad.relu(self.d2_up(ad.upsample2x(self.d2_block(f2))))
        g2 = self.mix2(f1, g2)
        g1 = ad.relu(self.d1_up(ad.upsample2x(self.d1_block(g2))))
        g1 = self.mix1(f0, g1)
        out = self.out_proj(g1)
        if ph or pw:
            out = ad.crop2d(out, h, w)
        return out
