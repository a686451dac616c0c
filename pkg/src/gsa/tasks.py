"""Multi-query associative recall (MQAR) data.

Layout of one instance of length ``T`` with ``N`` pairs::

    k1 v1 k2 v2 ... kN vN | query region (length T - 2N)

The query region contains every key exactly once, at random positions and in
random order; the remaining positions hold the pad token.  Supervision is
next-token: at a query position the target is the value bound to that key.
Token ids: 0 pad, 1 reserved, keys ``[2, 2 + numKeys)``, values after keys.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from typing import Iterable

import numpy as np

from .model import IGNORE_INDEX
from .tensor import ConfigError, Rng

PAD = 0
KEY_OFFSET = 2


@dataclass(frozen=True)
class MqarSpec:
    seq_len: int = 128
    num_pairs: int = 8
    num_keys: int = 16
    num_values: int = 16
    seed: int = 0

    def validate(self) -> "MqarSpec":
        if self.num_pairs < 1:
            raise ConfigError("num_pairs must be >= 1")
        if self.num_pairs > self.num_keys:
            raise ConfigError(f"{self.num_pairs} distinct keys requested from a pool of {self.num_keys}")
        if self.num_values < 1:
            raise ConfigError("num_values must be >= 1")
        if 3 * self.num_pairs > self.seq_len:
            raise ConfigError(f"seq_len {self.seq_len} cannot hold {self.num_pairs} pairs and their queries")
        return self

    @property
    def vocab(self) -> int:
        return KEY_OFFSET + self.num_keys + self.num_values

    @property
    def value_offset(self) -> int:
        return KEY_OFFSET + self.num_keys


@dataclass
class MqarInstance:
    tokens: np.ndarray
    targets: np.ndarray

    def to_json(self) -> str:
        return json.dumps({"tokens": self.tokens.tolist(), "targets": self.targets.tolist()})

    @classmethod
    def from_json(cls, line: str) -> "MqarInstance":
        d = json.loads(line)
        return cls(np.asarray(d["tokens"], dtype=np.int64), np.asarray(d["targets"], dtype=np.int64))


def mqar_instance(spec: MqarSpec, index: int) -> MqarInstance:
    """Instance ``index`` of the stream keyed by ``spec.seed``; a pure function of both."""
    rng = Rng.for_stream(spec.seed, index)
    N, T = spec.num_pairs, spec.seq_len
    keys = KEY_OFFSET + rng.permutation(spec.num_keys)[:N]
    values = spec.value_offset + rng.integers(spec.num_values, N)
    tokens = np.full(T, PAD, dtype=np.int64)
    targets = np.full(T, IGNORE_INDEX, dtype=np.int64)
    tokens[0:2 * N:2] = keys
    tokens[1:2 * N:2] = values
    free = 2 * N + rng.permutation(T - 2 * N)[:N]
    order = rng.permutation(N)
    tokens[free] = keys[order]
    targets[free] = values[order]
    return MqarInstance(tokens, targets)


def mqar_generate(spec: MqarSpec, count: int, start: int = 0) -> list[MqarInstance]:
    spec.validate()
    return [mqar_instance(spec, i) for i in range(start, start + count)]


def mqar_batch(spec: MqarSpec, count: int, start: int = 0) -> tuple[np.ndarray, np.ndarray]:
    insts = mqar_generate(spec, count, start)
    return np.stack([x.tokens for x in insts]), np.stack([x.targets for x in insts])


def mqar_accuracy(logits: np.ndarray, targets: np.ndarray) -> float:
    """Fraction of supervised positions whose argmax (lowest id on ties) hits the target."""
    targets = np.asarray(targets)
    mask = targets != IGNORE_INDEX
    if not mask.any():
        raise ValueError("no supervised positions")
    pred = np.argmax(logits, axis=-1)
    return float((pred[mask] == targets[mask]).mean())


def write_jsonl(instances: Iterable[MqarInstance], path) -> None:
    with open(path, "w") as f:
        for inst in instances:
            f.write(inst.to_json() + "\n")


def read_jsonl(path) -> list[MqarInstance]:
    with open(path) as f:
        return [MqarInstance.from_json(line) for line in f if line.strip()]
