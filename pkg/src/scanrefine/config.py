"""Pipeline configuration: ``[section]`` / ``key=value`` files plus flag overrides."""

from __future__ import annotations

import configparser
import dataclasses
import zlib
from dataclasses import dataclass, field, fields
from pathlib import Path
from typing import Iterable

from .errors import InvalidConfigError, NotFoundError
from .fusion import POLICIES
from .refiner.training import TrainConfig
from .synth import SceneConfig

# keys driven by other sections or by the run-level seed
_SCENE_EXCLUDED = {"seed", "q", "k", "remap_path"}
_TRAIN_EXCLUDED = {"seed"}


@dataclass
class DataConfig:
    root: str = ""  # empty: <out>/dataset
    remap: str = ""  # empty: bundled SemanticKITTI learning map
    q: int = 20
    k: int = 2
    train: str = "00,01,02,03,06,07,09,10"
    val: str = "08"
    test: str = "04,05"
    train_policy: str = "skip"
    infer_policy: str = "pad"
    index: str = "kdtree"


@dataclass
class NoiseSection:
    epsilon: float = 0.05
    p_occ: float = 0.6
    confusable: str = ""  # "car:road,road:car" (names or ids); empty: built-in map


@dataclass
class EvalConfig:
    split: str = "test"
    pred_root: str = ""  # empty: refined outputs
    strict: bool = False


@dataclass
class BenchConfig:
    frames: int = 10
    knn_sizes: tuple[int, ...] = (1000, 10_000, 100_000)
    knn_queries: int = 10_000


@dataclass
class RunConfig:
    seed: int = 0
    threads: int = 1
    deterministic: bool = False
    out: str = "out"


@dataclass
class SplitEntry:
    seq: str
    lo: int | None = None
    hi: int | None = None

    def frames(self, available: Iterable[int] | None = None) -> list[int]:
        if self.lo is not None:
            return list(range(self.lo, self.hi + 1))
        if available is None:
            raise InvalidConfigError(f"sequence {self.seq}: frame range unknown")
        return sorted(available)

    def __str__(self):
        return self.seq if self.lo is None else f"{self.seq}:{self.lo}-{self.hi}"


def parse_split(text: str) -> list[SplitEntry]:
    """``"00,01:20-29"`` -> entries; ranges are inclusive."""
    out = []
    for item in (s.strip() for s in text.split(",")):
        if not item:
            continue
        seq, sep, rng = item.partition(":")
        if not seq or "/" in seq or seq.startswith("."):
            raise InvalidConfigError(f"bad sequence id in split entry {item!r}")
        if not sep:
            out.append(SplitEntry(seq))
            continue
        lo, dash, hi = rng.partition("-")
        try:
            lo_i, hi_i = int(lo), int(hi)
        except ValueError:
            raise InvalidConfigError(f"bad frame range in split entry {item!r}") from None
        if not dash or lo_i < 0 or hi_i < lo_i:
            raise InvalidConfigError(f"bad frame range in split entry {item!r}")
        out.append(SplitEntry(seq, lo_i, hi_i))
    return out


SECTIONS = {
    "run": RunConfig,
    "data": DataConfig,
    "scene": SceneConfig,
    "noise": NoiseSection,
    "train": TrainConfig,
    "eval": EvalConfig,
    "bench": BenchConfig,
}
EXCLUDED = {"scene": _SCENE_EXCLUDED, "train": _TRAIN_EXCLUDED}


def _keys(section: str) -> list[dataclasses.Field]:
    return [f for f in fields(SECTIONS[section]) if f.name not in EXCLUDED.get(section, ())]


def _convert(raw: str, default, where: str):
    raw = raw.strip()
    try:
        if isinstance(default, bool):
            low = raw.lower()
            if low in ("1", "true", "yes", "on"):
                return True
            if low in ("0", "false", "no", "off"):
                return False
            raise ValueError(raw)
        if isinstance(default, int):
            return int(raw)
        if isinstance(default, float):
            return float(raw)
        if isinstance(default, tuple):
            kind = type(default[0]) if default else float
            return tuple(kind(x) for x in raw.replace(" ", "").split(",") if x)
        return raw
    except ValueError:
        raise InvalidConfigError(f"{where}: cannot parse {raw!r}") from None


def _format(value) -> str:
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, tuple):
        return ",".join(repr(v) if isinstance(v, float) else str(v) for v in value)
    if isinstance(value, float):
        return repr(value)
    return str(value)


@dataclass
class PipelineConfig:
    run: RunConfig = field(default_factory=RunConfig)
    data: DataConfig = field(default_factory=DataConfig)
    scene: SceneConfig = field(default_factory=SceneConfig)
    noise: NoiseSection = field(default_factory=NoiseSection)
    train: TrainConfig = field(default_factory=TrainConfig)
    eval: EvalConfig = field(default_factory=EvalConfig)
    bench: BenchConfig = field(default_factory=BenchConfig)

    # -- construction ------------------------------------------------------

    def set(self, key: str, raw: str) -> None:
        """Set ``section.key`` (or a bare key that is unique across sections)."""
        key = key.replace("-", "_")
        section, dot, name = key.rpartition(".")
        if dot:
            if section not in SECTIONS:
                raise InvalidConfigError(f"unknown config section {section!r}")
            candidates = [section] if name in {f.name for f in _keys(section)} else []
        else:
            candidates = [s for s in SECTIONS if name in {f.name for f in _keys(s)}]
        if not candidates:
            raise InvalidConfigError(f"unknown config key {key!r}")
        if len(candidates) > 1:
            raise InvalidConfigError(
                f"ambiguous key {key!r}; use one of " + ", ".join(f"{s}.{name}" for s in candidates))
        obj = getattr(self, candidates[0])
        setattr(obj, name, _convert(raw, getattr(obj, name), f"{candidates[0]}.{name}"))

    @classmethod
    def load(cls, path=None, overrides: Iterable[tuple[str, str]] = ()) -> "PipelineConfig":
        cfg = cls()
        if path is not None:
            path = Path(path)
            if not path.is_file():
                raise NotFoundError(f"config file not found: {path}")
            parser = configparser.ConfigParser(interpolation=None)
            try:
                parser.read_string(path.read_text(), source=str(path))
            except configparser.Error as exc:
                raise InvalidConfigError(f"{path}: {exc}") from None
            for section in parser.sections():
                if section not in SECTIONS:
                    raise InvalidConfigError(f"{path}: unknown section [{section}]")
                for name, raw in parser.items(section):
                    cfg.set(f"{section}.{name}", raw)
        for key, raw in overrides:
            cfg.set(key, raw)
        return cfg.validate()

    # -- derived values ----------------------------------------------------

    @property
    def out(self) -> Path:
        return Path(self.run.out)

    @property
    def root(self) -> Path:
        return Path(self.data.root) if self.data.root else self.out / "dataset"

    @property
    def threads(self) -> int:
        return 1 if self.run.deterministic else self.run.threads

    def splits(self) -> dict[str, list[SplitEntry]]:
        return {name: parse_split(getattr(self.data, name)) for name in ("train", "val", "test")}

    def policy(self, split: str) -> str:
        return self.data.train_policy if split == "train" else self.data.infer_policy

    def sequence_seed(self, seq: str) -> int:
        """Per-sequence seed; sequence ``"00"`` uses the run seed itself."""
        index = int(seq) if seq.isdigit() else zlib.crc32(seq.encode()) % 10_000
        return self.run.seed + 1000 * index

    def scene_for(self, seq: str) -> SceneConfig:
        sc = dataclasses.replace(self.scene, seed=self.sequence_seed(seq), q=self.data.q,
                                 k=self.data.k, remap_path=self.data.remap or None)
        return sc.validate()

    def train_config(self) -> TrainConfig:
        return dataclasses.replace(self.train, seed=self.run.seed).validate()

    def min_frames(self, split: str) -> int:
        return self.data.k + 1 if self.policy(split) == "skip" else 1

    # -- checks --------------------------------------------------------------

    def validate(self) -> "PipelineConfig":
        d = self.data
        if d.q < 2:
            raise InvalidConfigError("data.q must be >= 2")
        if d.k < 1:
            raise InvalidConfigError("data.k must be >= 1")
        for key in ("train_policy", "infer_policy"):
            if getattr(d, key) not in POLICIES:
                raise InvalidConfigError(f"data.{key} must be one of {POLICIES}")
        if d.index not in ("kdtree", "grid"):
            raise InvalidConfigError("data.index must be kdtree or grid")
        if self.run.threads < 1:
            raise InvalidConfigError("run.threads must be >= 1")
        if self.eval.split not in ("train", "val", "test"):
            raise InvalidConfigError("eval.split must be train, val or test")
        if self.bench.frames < 1 or self.bench.knn_queries < 1 or not self.bench.knn_sizes:
            raise InvalidConfigError("bench sizes must be positive")
        if not 0 <= self.noise.epsilon < 1 or not 0 <= self.noise.p_occ <= 1:
            raise InvalidConfigError("noise.epsilon must lie in [0, 1) and noise.p_occ in [0, 1]")
        self.train_config()
        splits = self.splits()
        if not splits["train"] and not splits["test"]:
            raise InvalidConfigError("no train or test sequences configured")
        claimed: dict[str, list[tuple[str, SplitEntry]]] = {}
        for name, entries in splits.items():
            for e in entries:
                if e.lo is not None and e.hi - e.lo + 1 < self.min_frames(name):
                    raise InvalidConfigError(
                        f"{name} entry {e} has {e.hi - e.lo + 1} frames; K={d.k} with policy "
                        f"{self.policy(name)!r} needs at least {self.min_frames(name)}")
                for other_name, other in claimed.get(e.seq, []):
                    if (e.lo is None or other.lo is None
                            or not (e.hi < other.lo or other.hi < e.lo)):
                        raise InvalidConfigError(
                            f"splits overlap: {name} {e} and {other_name} {other}")
                claimed.setdefault(e.seq, []).append((name, e))
        return self

    def to_text(self) -> str:
        parser = configparser.ConfigParser(interpolation=None)
        for section in SECTIONS:
            obj = getattr(self, section)
            parser[section] = {f.name: _format(getattr(obj, f.name)) for f in _keys(section)}
        lines = []
        for section in parser.sections():
            lines.append(f"[{section}]")
            lines += [f"{k} = {v}" for k, v in parser[section].items()]
            lines.append("")
        return "\n".join(lines)
