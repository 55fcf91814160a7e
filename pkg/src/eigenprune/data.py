"""INT-SUM / INT-MULT synthetic datasets over a closed single-token vocabulary.

Every prompt is exactly four tokens ``a op b =`` so each position always holds
the same kind of token; the answer is the single next token.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

MAX_INT = 361
SYMBOLS = ("+", "*", "=")
PAD = "<pad>"
OPS = {"sum": "+", "mult": "*"}
SEQ_LEN = 4
ANSWER_POS = SEQ_LEN - 1


class Vocab:
    """Integers ``0..361`` then ``+ * =`` then the pad token, in that id order."""

    def __init__(self):
        self.tokens = [str(i) for i in range(MAX_INT + 1)] + list(SYMBOLS) + [PAD]
        self.ids = {t: i for i, t in enumerate(self.tokens)}

    def __len__(self) -> int:
        return len(self.tokens)

    def encode(self, token) -> int:
        return self.ids[str(token)]

    def decode(self, idx: int) -> str:
        return self.tokens[idx]

    def write(self, path: Path) -> None:
        Path(path).write_text("".join(f"{i}\t{t}\n" for i, t in enumerate(self.tokens)))

    @classmethod
    def read(cls, path: Path) -> "Vocab":
        v = cls()
        rows = [line.split("\t") for line in Path(path).read_text().splitlines()]
        if [t for _, t in rows] != v.tokens or [int(i) for i, _ in rows] != list(range(len(v))):
            raise ValueError(f"{path}: vocabulary table does not match the built-in vocabulary")
        return v


VOCAB = Vocab()


def build_vocab(task: str | None = None) -> Vocab:
    # One shared vocabulary for both tasks keeps ids stable across them.
    return VOCAB


@dataclass(frozen=True)
class Example:
    a: int
    op: str
    b: int

    @property
    def y(self) -> int:
        return self.a + self.b if self.op == "+" else self.a * self.b

    @property
    def tokens(self) -> tuple[int, int, int, int]:
        return (VOCAB.encode(self.a), VOCAB.encode(self.op), VOCAB.encode(self.b), VOCAB.encode("="))

    @property
    def target(self) -> int:
        return VOCAB.encode(self.y)

    def to_json(self) -> str:
        return json.dumps({"a": self.a, "op": self.op, "b": self.b, "y": self.y}, separators=(",", ":"))


@dataclass(frozen=True)
class Dataset:
    task: str
    examples: tuple[Example, ...]

    def __len__(self) -> int:
        return len(self.examples)

    @property
    def vocab(self) -> Vocab:
        return VOCAB

    def tokens(self) -> np.ndarray:
        return np.array([e.tokens for e in self.examples], dtype=np.int64).reshape(-1, SEQ_LEN)

    def targets(self) -> np.ndarray:
        return np.array([e.target for e in self.examples], dtype=np.int64)

    def subset(self, idx) -> "Dataset":
        return Dataset(self.task, tuple(self.examples[i] for i in idx))


def _generate(task: str, top: int) -> Dataset:
    op = OPS[task]
    return Dataset(task, tuple(Example(a, op, b) for a in range(top + 1) for b in range(top + 1)))


def gen_int_sum(top: int = 99) -> Dataset:
    """All ordered pairs ``a + b`` with operands in ``0..top`` (10000 by default)."""
    return _generate("sum", top)


def gen_int_mult(top: int = 19) -> Dataset:
    return _generate("mult", top)


TASKS = {
    "sum": lambda: gen_int_sum(99),
    "sum-small": lambda: gen_int_sum(19),
    "mult": lambda: gen_int_mult(19),
}


def load_task(name: str) -> Dataset:
    try:
        return TASKS[name]()
    except KeyError:
        raise ValueError(f"unknown task {name!r}; choose from {sorted(TASKS)}") from None


def split(d: Dataset, train_fraction: float = 0.8, seed: int = 0) -> tuple[Dataset, Dataset]:
    if not 0.0 < train_fraction < 1.0:
        raise ValueError(f"train_fraction must be in (0, 1), got {train_fraction}")
    perm = np.random.default_rng(seed).permutation(len(d))
    cut = int(np.floor(len(d) * train_fraction))
    return d.subset(perm[:cut]), d.subset(perm[cut:])


def write_jsonl(d: Dataset, path: Path) -> None:
    Path(path).write_text("".join(e.to_json() + "\n" for e in d.examples))


def read_jsonl(path: Path, task: str | None = None) -> Dataset:
    examples = []
    for n, line in enumerate(Path(path).read_text().splitlines(), 1):
        if not line.strip():
            continue
        rec = json.loads(line)
        ex = Example(int(rec["a"]), rec["op"], int(rec["b"]))
        if rec.get("y") != ex.y:
            raise ValueError(f"{path}:{n}: y={rec.get('y')} does not match {ex.a} {ex.op} {ex.b}")
        examples.append(ex)
    if task is None:
        ops = {e.op for e in examples}
        task = "sum" if ops <= {"+"} else "mult"
    return Dataset(task, tuple(examples))
