"""Synthetic clean layers and backdoor-signature injection.

Clean heads draw weights i.i.d. Gaussian(0, weight_scale^2) and biases
Gaussian(0, bias_scale^2). The injector perturbs a single target row/bias
with one of the parameter signatures a trained-in backdoor leaves behind:
a uniform mean shift, a bias jump, a zero-mean directional component, an
inflated negative tail, random high-magnitude entries (bit flips), a
random mix of those, or a mean-suppressed variant that hides the shift but
keeps elevated variance. Magnitudes are expressed in units of weight_scale
so behavior is invariant to the latent dimension.

Everything is deterministic given (spec, seed); generation is
embarrassingly parallel.
"""

from __future__ import annotations

import enum
import math
from dataclasses import dataclass, replace
from typing import Sequence

import numpy as np

from dfbscan.calibration import ConfigSet
from dfbscan.errors import InvalidAttackError
from dfbscan.params import FinalLayerParams


class Attack(enum.Enum):
    NONE = "none"
    MEAN_BOOST = "mean_boost"
    BIAS_BOOST = "bias_boost"
    DIRECTIONAL = "directional"
    TAIL = "tail"
    MIXED = "mixed"
    BITFLIP = "bitflip"
    SUPPRESSED = "suppressed"


#: Attacks the MIXED variant may combine.
_MIXABLE = (Attack.MEAN_BOOST, Attack.BIAS_BOOST, Attack.DIRECTIONAL, Attack.TAIL)

#: Per-attack RNG stream salt, so clean generation and injection with the
#: same seed stay decorrelated.
_SALT = {attack: 1000 + i for i, attack in enumerate(Attack)}


@dataclass(frozen=True)
class SynthSpec:
    """Generator parameters. weight_scale defaults to 1/sqrt(d)."""

    k: int
    d: int
    weight_scale: float | None = None
    bias_scale: float = 0.01
    attack: Attack = Attack.NONE
    strength: float = 3.0
    target: int = 0
    seed: int = 0

    def __post_init__(self) -> None:
        if self.k < 2:
            raise ValueError(f"k must be at least 2, got {self.k}")
        if self.d < 1:
            raise ValueError(f"d must be at least 1, got {self.d}")
        if self.strength < 0:
            raise ValueError(f"strength must be nonnegative, got {self.strength}")
        if not 0 <= self.target < self.k:
            raise ValueError(f"target {self.target} out of range 0..{self.k - 1}")
        if self.weight_scale is None:
            object.__setattr__(self, "weight_scale", 1.0 / math.sqrt(self.d))


def generate_clean(spec: SynthSpec) -> FinalLayerParams:
    """Draw a clean final layer; deterministic in spec.seed."""
    if spec.attack != Attack.NONE:
        raise InvalidAttackError("generate_clean requires attack=NONE")
    rng = np.random.default_rng(spec.seed)
    weights = rng.normal(0.0, spec.weight_scale, size=(spec.k, spec.d))
    bias = rng.normal(0.0, spec.bias_scale, size=spec.k)
    return FinalLayerParams(
        weights=weights.astype(np.float32),
        bias=bias.astype(np.float32),
        meta={"synth_seed": str(spec.seed), "synth_attack": Attack.NONE.value},
    )


def inject(clean: FinalLayerParams, spec: SynthSpec) -> FinalLayerParams:
    """Apply spec.attack to row spec.target of a clean layer.

    Only the target row (and target bias) is ever modified. strength 0
    returns the input unchanged.
    """
    if spec.attack == Attack.NONE:
        raise InvalidAttackError("inject requires a non-NONE attack")
    meta = dict(clean.meta)
    meta.update(
        {
            "synth_attack": spec.attack.value,
            "synth_target": str(spec.target),
            "synth_strength": repr(spec.strength),
        }
    )
    if spec.strength == 0:
        return FinalLayerParams(weights=clean.weights, bias=clean.bias, meta=meta)

    w = clean.weights.astype(np.float64)
    b = clean.bias.astype(np.float64)
    rng = np.random.default_rng([spec.seed, _SALT[spec.attack]])
    if spec.attack == Attack.MIXED:
        size = int(rng.integers(1, len(_MIXABLE) + 1))
        picks = sorted(rng.choice(len(_MIXABLE), size=size, replace=False))
        for p in picks:
            _apply(_MIXABLE[p], spec.strength / 2.0, w, b, spec, rng)
    else:
        _apply(spec.attack, spec.strength, w, b, spec, rng)
    return FinalLayerParams(
        weights=w.astype(np.float32), bias=b.astype(np.float32), meta=meta
    )


def _apply(
    attack: Attack,
    strength: float,
    w: np.ndarray,
    b: np.ndarray,
    spec: SynthSpec,
    rng: np.random.Generator,
) -> None:
    t = spec.target
    ws = spec.weight_scale
    d = spec.d
    if attack == Attack.MEAN_BOOST:
        w[t] += strength * ws
    elif attack == Attack.BIAS_BOOST:
        b[t] += strength * (b.max() - b.min() + 1e-3)
    elif attack == Attack.DIRECTIONAL:
        # Zero-mean unit direction: raises L2/energy without moving the mean.
        v = rng.standard_normal(d)
        v -= v.mean()
        norm = np.linalg.norm(v)
        if norm == 0:  # d == 1 or a measure-zero draw
            v = np.zeros(d)
            norm = 1.0
        w[t] += strength * ws * math.sqrt(d) * (v / norm)
    elif attack == Attack.TAIL:
        q1 = np.quantile(w[t], 0.25)
        mask = w[t] < q1
        w[t, mask] *= 1.0 + strength
    elif attack == Attack.BITFLIP:
        count = min(math.ceil(strength), d)
        idx = rng.choice(d, size=count, replace=False)
        signs = rng.choice([-1.0, 1.0], size=count)
        w[t, idx] = signs * 8.0 * ws
    elif attack == Attack.SUPPRESSED:
        # Mean boost with the mean signature scrubbed back out; the residue
        # is the row spread scaled by 1 + strength/sqrt(d), deliberately subtle.
        mean_before = w[t].mean()
        w[t] += strength * ws
        gain = 1.0 + strength / math.sqrt(d)
        w[t] = mean_before + gain * (w[t] - w[t].mean())
    else:
        raise InvalidAttackError(f"cannot inject attack {attack!r}")


def generate_model(spec: SynthSpec) -> FinalLayerParams:
    """Clean layer for spec.seed, with spec.attack injected when not NONE."""
    clean = generate_clean(replace(spec, attack=Attack.NONE))
    if spec.attack == Attack.NONE:
        return clean
    return inject(clean, spec)


DEFAULT_BENCHMARK_ATTACKS = (
    Attack.MEAN_BOOST,
    Attack.BIAS_BOOST,
    Attack.DIRECTIONAL,
    Attack.TAIL,
    Attack.BITFLIP,
)


def _model_seeds(master_seed: int, count: int) -> list[int]:
    state = np.random.SeedSequence(master_seed).generate_state(count)
    return [int(s) for s in state]


def _labeled_set(
    template: SynthSpec,
    clean_count: int,
    per_attack: int,
    attacks: Sequence[Attack],
    master_seed: int,
    meta: dict[str, str],
) -> ConfigSet:
    seeds = _model_seeds(master_seed, clean_count + per_attack * len(attacks))
    cleans = [
        generate_model(replace(template, attack=Attack.NONE, seed=seeds[i]))
        for i in range(clean_count)
    ]
    backdoors = []
    for j, attack in enumerate(attacks):
        if attack == Attack.NONE:
            raise InvalidAttackError("benchmark attacks must not include NONE")
        for i in range(per_attack):
            idx = len(backdoors)
            target = idx % template.k  # cycle targets through all classes
            spec = replace(
                template,
                attack=attack,
                target=target,
                seed=seeds[clean_count + j * per_attack + i],
            )
            backdoors.append((generate_model(spec), target))
    return ConfigSet(cleans=tuple(cleans), backdoors=tuple(backdoors), meta=meta)


def generate_benchmark(
    template: SynthSpec,
    counts: tuple[int, int],
    attacks: Sequence[Attack] = DEFAULT_BENCHMARK_ATTACKS,
    master_seed: int = 0,
    holdout_counts: tuple[int, int] | None = None,
) -> tuple[ConfigSet, ConfigSet]:
    """Reproducible labeled benchmark: a configuration set plus a held-out
    evaluation set drawn from disjoint per-model seeds.

    ``counts`` is (clean models, backdoor models per attack) for the config
    set; ``holdout_counts`` defaults to the same. Backdoor targets cycle
    through all classes.
    """
    clean_count, per_attack = counts
    if clean_count < 1 or per_attack < 1:
        raise ValueError("counts must be at least 1 each")
    hold_clean, hold_attack = holdout_counts or counts
    config = _labeled_set(
        template,
        clean_count,
        per_attack,
        attacks,
        master_seed,
        meta={"role": "config", "master_seed": str(master_seed)},
    )
    holdout = _labeled_set(
        template,
        hold_clean,
        hold_attack,
        attacks,
        master_seed + 0x5EED,
        meta={"role": "holdout", "master_seed": str(master_seed)},
    )
    return config, holdout
