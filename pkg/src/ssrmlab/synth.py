"""Synthetic preference world with a known latent reward.

Each vocabulary token has a latent quality drawn from N(0, 1).  A response is
a bag of ``response_length`` uniformly drawn tokens and its reward is the sum
of their qualities.  Labels follow a Bradley-Terry law,
``P(A) = sigmoid(temperature * (r_a - r_b))``, or are the reward argmax when
``deterministic_labels`` is set.  Prompts are random tokens and carry no
signal.

Generation is organized in fixed-size blocks, each with its own seed derived
from ``(world seed, stream, block index)``, so a prefix of a larger sample is
identical to a smaller sample and blocks can be produced independently.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import NamedTuple, Sequence

import numpy as np
from scipy.special import expit

from ssrmlab.prefdata import Label, LabeledExample, PreferenceTriplet

BLOCK_SIZE = 256
PROMPT_LENGTH = 4

# stream ids separate independent samples drawn from one world
TRAIN_STREAM = 0
TEST_STREAM = 1
_BAYES_STREAM = 7


@dataclass(frozen=True, eq=False)
class WorldSpec:
    quality: np.ndarray
    response_length: int = 12
    temperature: float = 1.0
    deterministic_labels: bool = False
    seed: int = 0

    def __post_init__(self):
        q = np.asarray(self.quality, dtype=np.float64)
        if q.ndim != 1 or q.size < 2:
            raise ValueError("a world needs at least two tokens")
        if self.response_length < 1:
            raise ValueError("response_length must be >= 1")
        if self.temperature < 0:
            raise ValueError("temperature must be nonnegative")
        q.flags.writeable = False
        object.__setattr__(self, "quality", q)

    @property
    def vocab_size(self) -> int:
        return self.quality.size


@dataclass(frozen=True)
class SyntheticTriplet:
    triplet: PreferenceTriplet
    latent_reward_a: float
    latent_reward_b: float
    label: Label
    bayes_label: Label = field(init=False)

    def __post_init__(self):
        bayes = Label.A if self.latent_reward_a >= self.latent_reward_b else Label.B
        object.__setattr__(self, "bayes_label", bayes)

    @property
    def example(self) -> LabeledExample:
        return LabeledExample(self.triplet, self.label)


class MonteCarloEstimate(NamedTuple):
    value: float
    stderr: float


def sample_world(vocab_size: int = 500, seed: int = 0, *, response_length: int = 12,
                 temperature: float = 1.0, deterministic_labels: bool = False) -> WorldSpec:
    """Draw i.i.d. standard-normal token qualities."""
    if vocab_size < 2:
        raise ValueError("vocab_size must be >= 2; one token gives no preference signal")
    quality = np.random.default_rng([seed, 0x5EED]).standard_normal(vocab_size)
    return WorldSpec(quality, response_length, temperature, deterministic_labels, seed)


def token_name(i: int) -> str:
    return f"w{i}"


def _block(world: WorldSpec, stream: int, block: int):
    rng = np.random.default_rng([world.seed, stream, block])
    L = world.response_length
    prompt = rng.integers(0, world.vocab_size, size=(BLOCK_SIZE, PROMPT_LENGTH))
    resp = rng.integers(0, world.vocab_size, size=(BLOCK_SIZE, 2, L))
    u = rng.random(BLOCK_SIZE)
    rewards = world.quality[resp].sum(axis=2)
    return prompt, resp, rewards, u


def generate(world: WorldSpec, count: int, stream: int = TRAIN_STREAM,
             id_prefix: str = "") -> list[SyntheticTriplet]:
    """Sample ``count`` labeled triplets from ``world``."""
    if count <= 0:
        raise ValueError("count must be positive")
    out: list[SyntheticTriplet] = []
    n_blocks = -(-count // BLOCK_SIZE)
    for b in range(n_blocks):
        prompt, resp, rewards, u = _block(world, stream, b)
        take = min(BLOCK_SIZE, count - b * BLOCK_SIZE)
        for j in range(take):
            i = b * BLOCK_SIZE + j
            r_a, r_b = float(rewards[j, 0]), float(rewards[j, 1])
            if world.deterministic_labels:
                label = Label.A if r_a >= r_b else Label.B
            else:
                label = Label.A if u[j] < expit(world.temperature * (r_a - r_b)) else Label.B
            t = PreferenceTriplet(
                prompt=" ".join(token_name(k) for k in prompt[j]),
                response_a=" ".join(token_name(k) for k in resp[j, 0]),
                response_b=" ".join(token_name(k) for k in resp[j, 1]),
                id=f"{id_prefix}{i}",
                category="hard" if abs(r_a - r_b) < 2.0 else "easy",
            )
            out.append(SyntheticTriplet(t, r_a, r_b, label))
    return out


def bayes_accuracy(world: WorldSpec, sample_count: int = 100_000) -> MonteCarloEstimate:
    """Monte-Carlo estimate of the accuracy ceiling ``E[max(p, 1 - p)]``.

    ``p`` is the true probability that A is preferred.  No predictor can beat
    this in expectation on labels drawn from ``world``.
    """
    if world.deterministic_labels:
        return MonteCarloEstimate(1.0, 0.0)
    rng = np.random.default_rng([world.seed, _BAYES_STREAM])
    L = world.response_length
    resp = rng.integers(0, world.vocab_size, size=(sample_count, 2, L))
    gap = world.quality[resp].sum(axis=2) @ np.array([1.0, -1.0])
    p = expit(world.temperature * gap)
    best = np.maximum(p, 1.0 - p)
    return MonteCarloEstimate(float(best.mean()), float(best.std(ddof=1) / np.sqrt(sample_count)))


def write_oracle(path: str | Path, items: Sequence[SyntheticTriplet], meta: dict | None = None) -> None:
    """Side file with latent rewards and Bayes labels, keyed by record id."""
    with open(path, "w", encoding="utf-8", newline="\n") as f:
        if meta is not None:
            f.write(json.dumps({"_meta": meta}, sort_keys=True) + "\n")
        for s in items:
            f.write(json.dumps({"id": s.triplet.id,
                                "latent_reward_a": s.latent_reward_a,
                                "latent_reward_b": s.latent_reward_b,
                                "bayes_label": s.bayes_label.value}) + "\n")


def read_oracle(path: str | Path) -> dict[str, dict]:
    rows = {}
    with open(path, encoding="utf-8") as f:
        for line in f:
            obj = json.loads(line)
            if "_meta" in obj:
                continue
            rows[obj["id"]] = obj
    return rows
