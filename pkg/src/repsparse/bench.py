"""Per-layer op counts, wall-clock timing and density figures for a list of
quantized convolution layers."""

from __future__ import annotations

import time
from dataclasses import asdict, dataclass, field

import numpy as np

from .quantize import BINARY, QuantizedLayer, density
from .repkernel import build_plan, execute_plan, synthetic_layer
from .tensor import ConvSpec, count_naive_ops


@dataclass(frozen=True)
class LayerShape:
    name: str
    R: int
    S: int
    C: int
    K: int
    out_hw: int
    stride: int = 1

    @property
    def spec(self) -> ConvSpec:
        return ConvSpec(self.R, self.S, self.C, self.K, self.stride, self.R // 2)

    @property
    def in_hw(self) -> int:
        return self.out_hw * self.stride

    @property
    def pixels(self) -> int:
        return self.out_hw * self.out_hw


def resnet18_layers() -> list[LayerShape]:
    """Quantized 3x3 and 1x1 convolutions of ResNet-18 at 224x224 input
    (the stem and classifier stay full precision)."""
    layers = []
    for i in range(4):
        layers.append(LayerShape(f"layer1.conv{i}", 3, 3, 64, 64, 56))
    for stage, (cin, c, hw) in enumerate([(64, 128, 28), (128, 256, 14), (256, 512, 7)], 2):
        layers.append(LayerShape(f"layer{stage}.conv0", 3, 3, cin, c, hw, 2))
        for i in range(1, 4):
            layers.append(LayerShape(f"layer{stage}.conv{i}", 3, 3, c, c, hw))
        layers.append(LayerShape(f"layer{stage}.downsample", 1, 1, cin, c, hw, 2))
    return layers


def parse_shapes(text: str) -> list[LayerShape]:
    """Parse ``R,S,C,K@HW[/stride]`` items separated by ``;``."""
    out = []
    for i, item in enumerate(filter(None, (s.strip() for s in text.split(";")))):
        dims, _, rest = item.partition("@")
        hw, _, stride = rest.partition("/")
        R, S, C, K = (int(v) for v in dims.split(","))
        out.append(LayerShape(f"layer{i}", R, S, C, K, int(hw or 1), int(stride or 1)))
    return out


@dataclass
class LayerProfile:
    name: str
    scheme: str
    sparsity_support: bool
    plan_ops: int
    naive_ops: int
    reduction: float
    density: float
    pixels: int
    wall_min: float | None = None
    wall_median: float | None = None


@dataclass
class EfficiencyReport:
    layers: list[LayerProfile]
    config: dict
    # end-to-end seconds per trial, keyed by "scheme/sparsity"
    trial_totals: dict = field(default_factory=dict)

    def totals(self, scheme, sparsity_support) -> dict:
        rows = [p for p in self.layers
                if p.scheme == scheme and p.sparsity_support == sparsity_support]
        if not rows:
            raise KeyError(f"no rows for {scheme} sparsity={sparsity_support}")
        weights = sum(p.naive_ops for p in rows)
        out = {
            "plan_ops": sum(p.plan_ops * p.pixels for p in rows),
            "naive_ops": sum(p.naive_ops * p.pixels for p in rows),
            # parameter-weighted density over the layer list
            "density": sum(p.density * p.naive_ops for p in rows) / weights,
        }
        trials = self.trial_totals.get(_config_key(scheme, sparsity_support))
        if trials:
            out["wall_median"] = float(np.median(trials))
            out["wall_min"] = float(min(trials))
        return out

    def _configs(self) -> list[tuple]:
        seen = []
        for p in self.layers:
            key = (p.scheme, p.sparsity_support)
            if key not in seen:
                seen.append(key)
        return seen

    def baseline(self, preferred=(BINARY, False)) -> tuple:
        """``preferred`` when profiled, otherwise the first configuration."""
        seen = self._configs()
        return tuple(preferred) if tuple(preferred) in seen else seen[0]

    def summary(self, baseline=(BINARY, False)) -> list[dict]:
        baseline = self.baseline(baseline)
        base = self.totals(*baseline)
        seen = self._configs()
        rows = []
        for scheme, sp in seen:
            t = self.totals(scheme, sp)
            d = t["density"]
            row = {
                "baseline": _config_key(*baseline),
                "scheme": scheme,
                "sparsity_support": sp,
                "plan_ops": t["plan_ops"],
                "op_speedup": base["plan_ops"] / t["plan_ops"],
                "density": d,
                "throughput_potential": throughput_potential(d),
                "energy_proxy": d,
            }
            if "wall_median" in t and "wall_median" in base:
                row["wall_median_s"] = t["wall_median"]
                row["wall_min_s"] = t["wall_min"]
                row["wall_speedup"] = base["wall_median"] / t["wall_median"]
            rows.append(row)
        return rows

    def as_dict(self) -> dict:
        return {
            "config": self.config,
            "layers": [asdict(p) for p in self.layers],
            "summary": self.summary(),
            "trial_totals": self.trial_totals,
            "notes": "op counts are exact and machine independent; wall-clock fields "
                     "depend on the host. energy_proxy is the effectual-operation "
                     "fraction, not a simulated energy figure.",
        }


def _config_key(scheme, sparsity_support) -> str:
    return f"{scheme}/{'on' if sparsity_support else 'off'}"


def throughput_potential(d: float) -> float:
    """Upper bound on throughput gain when only effectual weights cost work."""
    if d <= 0:
        return float("inf")
    return 1.0 / d


def time_plan(plan, x, trials: int) -> tuple[float, float, list[float]]:
    times = []
    for _ in range(trials):
        t0 = time.perf_counter()
        execute_plan(plan, x)
        times.append(time.perf_counter() - t0)
    return min(times), float(np.median(times)), times


def profile_layers(
    layers: list[LayerShape],
    schemes=(BINARY, "signed-binary"),
    sparsity_flags=(True, False),
    sparsity: float = 0.65,
    trials: int = 0,
    seed: int = 0,
    quantized: dict[str, QuantizedLayer] | None = None,
) -> EfficiencyReport:
    """Build plans for every (layer, scheme, flag) and optionally time them.

    Layers come from ``quantized[name]`` when given, else from
    :func:`synthetic_layer` at ``sparsity``. With ``trials > 0`` every
    configuration's whole layer list is executed ``trials`` times, cycling
    through configurations so slow drift in the host affects all alike.
    """
    rng = np.random.default_rng(seed)
    plans = {}
    inputs = {}
    profiles = []
    for scheme in schemes:
        for sp in sparsity_flags:
            for i, ls in enumerate(layers):
                if quantized is not None:
                    layer = quantized[ls.name]
                else:
                    layer = synthetic_layer((ls.R, ls.S, ls.C, ls.K), scheme, sparsity, seed + i)
                spec = ls.spec
                plan = build_plan(layer, spec, sp)
                plans[(scheme, sp, ls.name)] = plan
                naive = count_naive_ops(spec).total
                profiles.append(
                    LayerProfile(
                        ls.name, scheme, sp, plan.op_counts.total, naive,
                        naive / max(plan.op_counts.total, 1), density(layer), ls.pixels,
                    )
                )
    if trials:
        for ls in layers:
            inputs[ls.name] = rng.standard_normal((1, ls.in_hw, ls.in_hw, ls.C)).astype(np.float32)
        configs = [(s, sp) for s in schemes for sp in sparsity_flags]
        samples = {(c, ls.name): [] for c in configs for ls in layers}
        for _ in range(trials):
            for cfg in configs:
                for ls in layers:
                    plan = plans[(*cfg, ls.name)]
                    t0 = time.perf_counter()
                    execute_plan(plan, inputs[ls.name])
                    samples[(cfg, ls.name)].append(time.perf_counter() - t0)
        for p in profiles:
            ts = samples[((p.scheme, p.sparsity_support), p.name)]
            p.wall_min = min(ts)
            p.wall_median = float(np.median(ts))
        trial_totals = {
            _config_key(*cfg): [sum(samples[(cfg, ls.name)][i] for ls in layers)
                                for i in range(trials)]
            for cfg in configs
        }
    else:
        trial_totals = {}
    config = {
        "layers": [asdict(ls) for ls in layers],
        "schemes": list(schemes),
        "sparsity_flags": list(sparsity_flags),
        "synthetic_sparsity": None if quantized is not None else sparsity,
        "trials": trials,
        "seed": seed,
    }
    return EfficiencyReport(profiles, config, trial_totals)
