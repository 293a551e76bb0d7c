"""Toy-scale encoder / decoder network with auxiliary decoders.

The encoder is a three-block conv trunk (total stride 8) topped by a small
pooling pyramid. Decoders upsample with sub-pixel convolutions. All auxiliary
decoders share the main decoder's architecture but own their parameters.
"""
from typing import Sequence, Union

import torch
import torch.nn as nn
import torch.nn.functional as F

STRIDE = 8
RELU_SHIFT = 4.0


def pixel_shuffle(t, r):
    """Rearrange (B, C*r*r, h, w) into (B, C, h*r, w*r).

    ``out[b, c, i*r + p, j*r + q] = t[b, c*r*r + p*r + q, i, j]``
    """
    b, c, h, w = t.shape
    if c % (r * r):
        raise ValueError(f"channel count {c} is not divisible by r^2 = {r * r}")
    oc = c // (r * r)
    t = t.reshape(b, oc, r, r, h, w).permute(0, 1, 4, 2, 5, 3)
    return t.reshape(b, oc, h * r, w * r)


def pixel_unshuffle(t, r):
    """Inverse of :func:`pixel_shuffle`."""
    b, c, hr, wr = t.shape
    if hr % r or wr % r:
        raise ValueError("spatial dims must be divisible by r")
    h, w = hr // r, wr // r
    t = t.reshape(b, c, h, r, w, r).permute(0, 1, 3, 5, 2, 4)
    return t.reshape(b, c * r * r, h, w)


class _GradReverse(torch.autograd.Function):

    @staticmethod
    def forward(ctx, x, lam):
        ctx.lam = lam
        return x.view_as(x)

    @staticmethod
    def backward(ctx, grad_output):
        return grad_output.neg() * ctx.lam, None


def grad_reverse(x, lam=1.0):
    return _GradReverse.apply(x, lam)


class Encoder(nn.Module):

    def __init__(self, in_channels=3, depth=64, widths=(16, 32, 64), groups=4, convs_per_block=2):
        super().__init__()
        if depth % 4:
            raise ValueError("encoder depth must be divisible by 4")
        blocks = []
        prev = in_channels
        for width in widths:
            layers = []
            for _ in range(convs_per_block):
                layers += [nn.Conv2d(prev, width, 3, padding=1), nn.GroupNorm(groups, width), nn.ReLU(inplace=True)]
                prev = width
            blocks.append(nn.Sequential(*layers, nn.MaxPool2d(2)))
        self.trunk = nn.Sequential(*blocks)
        self.grid_sizes = (1, 2, 4)
        self.pyramid = nn.ModuleList(nn.Conv2d(prev, depth // 4, 1) for _ in self.grid_sizes)
        self.fuse = nn.Conv2d(prev + len(self.grid_sizes) * (depth // 4), depth, 1)
        self.depth = depth
        for mod in self.modules():
            if isinstance(mod, nn.Conv2d):
                nn.init.kaiming_normal_(mod.weight, nonlinearity="relu")
                nn.init.zeros_(mod.bias)

    def forward(self, x):
        if x.dim() != 4 or x.shape[2] % STRIDE or x.shape[3] % STRIDE:
            raise ValueError(f"expected (B, C, H, W) with H, W multiples of {STRIDE}, got {tuple(x.shape)}")
        feats = self.trunk(x)
        size = feats.shape[2:]
        pooled = [feats]
        for grid, conv in zip(self.grid_sizes, self.pyramid):
            p = F.relu(conv(F.adaptive_avg_pool2d(feats, grid)))
            pooled.append(F.interpolate(p, size=size, mode="bilinear", align_corners=False))
        return F.relu(self.fuse(torch.cat(pooled, dim=1)))


class Decoder(nn.Module):
    """Linear 1x1 conv to C channels, then three [1x1 conv C->4C, ReLU, pixel shuffle x2] stages.

    The last stage skips the ReLU so the output is raw logits.
    """

    def __init__(self, depth, num_classes, stages=3):
        super().__init__()
        self.stem = nn.Conv2d(depth, num_classes, 1)
        self.upsample = nn.ModuleList(nn.Conv2d(num_classes, 4 * num_classes, 1) for _ in range(stages))
        self.reset_parameters()

    def reset_parameters(self, relu_shift=RELU_SHIFT):
        """Start every stage as exact nearest-neighbour upsampling of the stem logits.

        Each stage's weight is the identity repeated over the r*r sub-pixel slots;
        a positive bias keeps the ReLUs in their linear range, and since the shift is
        the same on every class channel it leaves the softmax unchanged.
        """
        nn.init.kaiming_normal_(self.stem.weight, nonlinearity="relu")
        nn.init.zeros_(self.stem.bias)
        last = len(self.upsample) - 1
        for i, conv in enumerate(self.upsample):
            c = conv.in_channels
            eye = torch.eye(c).repeat_interleave(4, dim=0)
            with torch.no_grad():
                conv.weight.copy_(eye.view(4 * c, c, 1, 1))
                conv.bias.fill_(relu_shift if i != last else 0.0)

    def forward(self, z):
        x = self.stem(z)
        last = len(self.upsample) - 1
        for i, conv in enumerate(self.upsample):
            x = conv(x)
            if i != last:
                x = F.relu(x)
            x = pixel_shuffle(x, 2)
        return x


class ClassBranch(nn.Module):
    """Global average pooling followed by a linear layer, one logit per foreground class."""

    def __init__(self, depth, num_classes):
        super().__init__()
        self.fc = nn.Linear(depth, num_classes - 1)

    def forward(self, z):
        return self.fc(z.mean(dim=(2, 3)))


class Discriminator(nn.Module):

    def __init__(self, depth, widths=(64, 128), slope=0.2):
        super().__init__()
        layers = []
        prev = depth
        for width in widths:
            layers += [nn.Conv2d(prev, width, 3, padding=1), nn.LeakyReLU(slope)]
            prev = width
        layers.append(nn.Conv2d(prev, 2, 1))
        self.net = nn.Sequential(*layers)

    def forward(self, z, lambda_rev=1.0):
        # lambda_rev=None disables the reversal (plain gradient pass-through)
        if lambda_rev is not None:
            z = grad_reverse(z, lambda_rev)
        return self.net(z)


class DomainHead(nn.Module):

    def __init__(self, depth, num_classes, num_aux):
        super().__init__()
        self.num_classes = num_classes
        self.main = Decoder(depth, num_classes)
        self.aux = nn.ModuleList(Decoder(depth, num_classes) for _ in range(num_aux))


class CCTNet(nn.Module):
    """Shared encoder with one main decoder and K auxiliary decoders per domain.

    ``num_classes`` is an int for a single domain or a list of per-domain class
    counts. The classification branch targets the first domain.
    """

    def __init__(self, num_classes: Union[int, Sequence[int]], num_aux=30, depth=64,
                 widths=(16, 32, 64), with_discriminator=False):
        super().__init__()
        if isinstance(num_classes, int):
            num_classes = [num_classes]
        self.domain_classes = list(num_classes)
        self.num_aux = num_aux
        self.depth = depth
        self.widths = tuple(widths)
        self.encoder = Encoder(depth=depth, widths=widths)
        self.heads = nn.ModuleList(DomainHead(depth, c, num_aux) for c in self.domain_classes)
        self.classifier = ClassBranch(depth, self.domain_classes[0])
        self.discriminator = Discriminator(depth) if with_discriminator else None

    @property
    def num_classes(self):
        return self.domain_classes[0]

    def encode(self, x):
        return self.encoder(x)

    def decode(self, z, domain=0, aux=None):
        head = self.heads[domain]
        decoder = head.main if aux is None else head.aux[aux]
        return decoder(z)

    def decode_aux(self, zs, domain=0):
        """All auxiliary decoders of a domain on their own (perturbed) inputs; (K, B, C, H, W)."""
        aux = self.heads[domain].aux
        if len(zs) != len(aux):
            raise ValueError(f"expected {len(aux)} inputs, got {len(zs)}")
        return torch.stack([dec(z) for dec, z in zip(aux, zs)])

    def classify(self, z):
        return self.classifier(z)

    def discriminate(self, z, lambda_rev=1.0):
        if self.discriminator is None:
            raise RuntimeError("model was built without a discriminator branch")
        return self.discriminator(z, lambda_rev)

    def forward(self, x, domain=0):
        return self.decode(self.encode(x), domain)
