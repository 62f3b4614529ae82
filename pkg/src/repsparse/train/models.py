"""Small CNNs with quantized hidden convolutions.

The first convolution and the classifier always stay full precision.
"""

from __future__ import annotations

from torch import nn
from torch.nn import functional as F

from .layers import QuantConv2d


def _act(kind, channels):
    if kind == "prelu":
        return nn.PReLU(channels)
    if kind == "relu":
        return nn.ReLU()
    raise ValueError(f"unknown nonlinearity {kind!r}")


class _QuantArgs:
    """Hands out per-layer quantizer arguments with distinct region seeds
    (layer ``j`` uses ``seed + j``)."""

    def __init__(self, variant, delta_coeff, fraction_pos, c_tile, multiplier, seed):
        self.kw = dict(variant=variant, delta_coeff=delta_coeff, fraction_pos=fraction_pos,
                       c_tile=c_tile, multiplier=multiplier)
        self.seed = seed
        self.count = 0

    def conv(self, cin, cout, k=3, stride=1, padding=1):
        layer = QuantConv2d(cin, cout, k, stride, padding, seed=self.seed + self.count, **self.kw)
        self.count += 1
        return layer


class CNN4(nn.Module):
    """conv(fp) -> qconv -> qconv -> linear(fp), for small grayscale images."""

    def __init__(self, in_channels=1, n_classes=10, width=16, nonlinearity="prelu", **qkw):
        super().__init__()
        q = _QuantArgs(**qkw)
        self.conv1 = nn.Conv2d(in_channels, width, 3, padding=1, bias=False)
        self.bn1 = nn.BatchNorm2d(width)
        self.act1 = _act(nonlinearity, width)
        self.conv2 = q.conv(width, 2 * width)
        self.bn2 = nn.BatchNorm2d(2 * width)
        self.act2 = _act(nonlinearity, 2 * width)
        self.conv3 = q.conv(2 * width, 2 * width)
        self.bn3 = nn.BatchNorm2d(2 * width)
        self.act3 = _act(nonlinearity, 2 * width)
        self.fc = nn.Linear(2 * width, n_classes)

    def forward(self, x):
        x = self.act1(self.bn1(self.conv1(x)))
        x = F.max_pool2d(self.act2(self.bn2(self.conv2(x))), 2)
        x = F.max_pool2d(self.act3(self.bn3(self.conv3(x))), 2)
        x = F.adaptive_avg_pool2d(x, 1).flatten(1)
        return self.fc(x)


class _Block(nn.Module):
    def __init__(self, q, cin, cout, stride, nonlinearity):
        super().__init__()
        self.conv1 = q.conv(cin, cout, stride=stride)
        self.bn1 = nn.BatchNorm2d(cout)
        self.act1 = _act(nonlinearity, cout)
        self.conv2 = q.conv(cout, cout)
        self.bn2 = nn.BatchNorm2d(cout)
        self.act2 = _act(nonlinearity, cout)
        self.pad = cout - cin
        self.stride = stride

    def forward(self, x):
        out = self.act1(self.bn1(self.conv1(x)))
        out = self.bn2(self.conv2(out))
        # parameter-free shortcut: subsample and zero-pad channels
        sc = x[:, :, :: self.stride, :: self.stride] if self.stride > 1 else x
        if self.pad:
            sc = F.pad(sc, (0, 0, 0, 0, self.pad // 2, self.pad - self.pad // 2))
        return self.act2(out + sc)


class ResNet20(nn.Module):
    def __init__(self, in_channels=3, n_classes=10, nonlinearity="prelu", **qkw):
        super().__init__()
        q = _QuantArgs(**qkw)
        self.conv1 = nn.Conv2d(in_channels, 16, 3, padding=1, bias=False)
        self.bn1 = nn.BatchNorm2d(16)
        self.act1 = _act(nonlinearity, 16)
        blocks = []
        cin = 16
        for cout, stride in ((16, 1), (32, 2), (64, 2)):
            for i in range(3):
                blocks.append(_Block(q, cin, cout, stride if i == 0 else 1, nonlinearity))
                cin = cout
        self.blocks = nn.Sequential(*blocks)
        self.fc = nn.Linear(64, n_classes)

    def forward(self, x):
        x = self.blocks(self.act1(self.bn1(self.conv1(x))))
        return self.fc(F.adaptive_avg_pool2d(x, 1).flatten(1))


MODELS = {"cnn4": CNN4, "resnet20": ResNet20}


def build_model(name, in_channels, n_classes, nonlinearity="prelu", variant="signed-binary",
                delta_coeff=0.05, fraction_pos=0.5, c_tile=None, multiplier=1, seed=0,
                **extra):
    try:
        cls = MODELS[name]
    except KeyError:
        raise ValueError(f"unknown model {name!r}; choose from {sorted(MODELS)}") from None
    return cls(in_channels=in_channels, n_classes=n_classes, nonlinearity=nonlinearity,
               variant=variant, delta_coeff=delta_coeff, fraction_pos=fraction_pos,
               c_tile=c_tile, multiplier=multiplier, seed=seed, **extra)


def quant_layers(model):
    return [(name, m) for name, m in model.named_modules() if isinstance(m, QuantConv2d)]
