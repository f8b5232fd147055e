"""Command-line pipeline: gen, fuse, train, refine, eval and bench.

Every command loads and validates the configuration, echoes it together with
the seed, and only then touches the output directory. All files are written
atomically so a failed run leaves no partial outputs behind.
"""

from __future__ import annotations

import argparse
import dataclasses
import logging
import sys
import time
from contextlib import nullcontext
from pathlib import Path

import numpy as np

from . import synth
from .config import PipelineConfig, SplitEntry
from .errors import InvalidConfigError, NotFoundError, ScanRefineError
from .frame_io import (
    LabelArray,
    apply_pose,
    frame_paths,
    inverse_remap,
    list_frames,
    load_remap,
    read_frame,
    read_labels,
    read_poses,
    write_labels,
)
from .fusion import _fuse, fuse_sequence, read_features, read_scores, write_features, write_scores
from .knn import bench_search, build_index, format_report
from .metrics import (
    ConfusionMatrix,
    accumulate,
    compare,
    diff_labels,
    format_delta_report,
    format_iou_report,
    miou,
    write_diff,
)
from .refiner import init_model, load_model, predict, refine, save_model, train
from .refiner.training import format_history
from ._atomic import atomic_write_text

log = logging.getLogger("scanrefine")

COMMANDS = ("gen", "fuse", "train", "refine", "eval", "bench")


# ---------------------------------------------------------------------------
# Helpers
# ---------------------------------------------------------------------------


def _seq_dir(root: Path, seq: str) -> Path:
    return root / "sequences" / seq


def _feature_path(cfg: PipelineConfig, seq: str, frame: int) -> Path:
    return cfg.out / "features" / seq / f"{frame:06d}.p2ft"


def _refined_dir(cfg: PipelineConfig, seq: str) -> Path:
    return cfg.out / "refined" / "sequences" / seq


def _require(path: Path, hint: str = "") -> Path:
    if not path.exists():
        raise NotFoundError(f"missing input: {path}" + (f" ({hint})" if hint else ""))
    return path


def _entry_frames(cfg: PipelineConfig, split: str, entry: SplitEntry) -> list[int]:
    seq_dir = _require(_seq_dir(cfg.root, entry.seq), "run gen or point data.root at a dataset")
    available = list_frames(seq_dir)
    frames = entry.frames(available)
    missing = sorted(set(frames) - set(available))
    if missing:
        raise NotFoundError(f"sequence {entry.seq}: frame {missing[0]:06d} not found")
    if len(frames) < cfg.min_frames(split):
        raise InvalidConfigError(
            f"{split} entry {entry} has {len(frames)} frames; K={cfg.data.k} with policy "
            f"{cfg.policy(split)!r} needs at least {cfg.min_frames(split)}")
    return frames


def _fused_ids(cfg: PipelineConfig, split: str, frames: list[int]) -> list[int]:
    """Frames of an entry that receive a fused feature row set under the split's policy."""
    return frames[cfg.data.k:] if cfg.policy(split) == "skip" else frames


def _remap(cfg: PipelineConfig) -> dict[int, int]:
    return load_remap(cfg.data.remap or None)


def _confusable(cfg: PipelineConfig, class_ids: dict[str, int]) -> dict[int, int] | None:
    text = cfg.noise.confusable.strip()
    if not text:
        return None
    out = {}
    for pair in text.split(","):
        a, sep, b = pair.strip().partition(":")
        if not sep:
            raise InvalidConfigError(f"noise.confusable: bad pair {pair!r}")
        ids = []
        for name in (a.strip(), b.strip()):
            if name.isdigit():
                ids.append(int(name))
            elif name in class_ids:
                ids.append(class_ids[name])
            else:
                raise InvalidConfigError(f"noise.confusable: unknown class {name!r}")
        out[ids[0]] = ids[1]
    return out


def _noise(cfg: PipelineConfig, scene: synth.SceneConfig) -> synth.NoiseConfig:
    ids = scene.class_ids()
    confusable = _confusable(cfg, ids)
    kw = dict(epsilon=cfg.noise.epsilon, p_occ=cfg.noise.p_occ, seed=scene.seed)
    if confusable is None:
        return synth.NoiseConfig.with_default_map(ids, **kw).validate(cfg.data.q)
    return synth.NoiseConfig(confusable=confusable, **kw).validate(cfg.data.q)


def _thread_limit(cfg: PipelineConfig):
    try:
        from threadpoolctl import threadpool_limits
    except ImportError:  # pragma: no cover - optional
        return nullcontext()
    return threadpool_limits(limits=cfg.threads)


def _echo(cfg: PipelineConfig, command: str, stream) -> None:
    stream.write(f"# scanrefine {command} seed={cfg.run.seed}\n")
    stream.write(cfg.to_text())
    stream.flush()


# ---------------------------------------------------------------------------
# Commands
# ---------------------------------------------------------------------------


def cmd_gen(cfg: PipelineConfig, stream=sys.stdout) -> dict:
    """Generate every sequence named in the splits, with oracle scores."""
    splits = cfg.splits()
    need: dict[str, int] = {}
    for name, entries in splits.items():
        for e in entries:
            last = e.hi if e.hi is not None else cfg.scene.frames - 1
            if last >= cfg.scene.frames:
                raise InvalidConfigError(
                    f"{name} entry {e} reaches frame {last} but scene.frames={cfg.scene.frames}")
            if e.lo is None and cfg.scene.frames < cfg.min_frames(name):
                raise InvalidConfigError(
                    f"scene.frames={cfg.scene.frames} is too short for K={cfg.data.k}")
            need[e.seq] = cfg.scene.frames
    scenes = {seq: cfg.scene_for(seq) for seq in need}
    noises = {seq: _noise(cfg, sc) for seq, sc in scenes.items()}
    summary = {}
    for seq in sorted(need):
        sc, noise = scenes[seq], noises[seq]
        frames = synth.gen_sequence(sc)
        scores = [synth.oracle_scores(s.frame, s.labels, s.occluded, noise, sc.q) for s in frames]
        stats = synth.refinability(frames, sc.k)
        occluded = int(sum(s.occluded.sum() for s in frames))
        total = int(sum(len(s.frame) for s in frames))
        manifest = {
            "sequence": seq,
            "seed": sc.seed,
            "scene": synth.config_dict(sc),
            "noise": {"epsilon": noise.epsilon, "p_occ": noise.p_occ, "seed": noise.seed,
                      "confusable": {str(k): v for k, v in sorted(noise.confusable.items())}},
            "occluded_points": occluded,
            "total_points": total,
            "refinability": stats,
        }
        synth.write_sequence(_seq_dir(cfg.root, seq), frames, scores, manifest)
        summary[seq] = manifest
        stream.write(f"gen seq={seq} seed={sc.seed} frames={len(frames)} "
                     f"occluded_fraction={occluded / total:.4f} "
                     f"refinability={stats['fraction']:.4f}\n")
    return summary


def _load_entry(cfg: PipelineConfig, seq: str, frames: list[int]):
    seq_dir = _seq_dir(cfg.root, seq)
    poses = read_poses(_require(seq_dir / "poses.txt"))
    if len(poses) <= frames[-1]:
        raise InvalidConfigError(f"sequence {seq}: poses.txt has {len(poses)} lines, "
                                 f"need {frames[-1] + 1}")
    for t in frames:
        p = frame_paths(seq_dir, t)
        yield (read_frame(_require(p["velodyne"])), poses[t],
               read_scores(_require(p["scores"], "base-model scores")))


def cmd_fuse(cfg: PipelineConfig, stream=sys.stdout) -> int:
    """Fuse every split entry into a per-frame feature cache."""
    plan = [(name, e, _entry_frames(cfg, name, e))
            for name, entries in cfg.splits().items() for e in entries]
    count = 0
    for name, e, frames in plan:
        fused = fuse_sequence(_load_entry(cfg, e.seq, frames), cfg.data.k, cfg.policy(name),
                              cfg.data.index, cfg.threads)
        for f in fused:
            if f.q != cfg.data.q:
                raise InvalidConfigError(f"scores have q={f.q}, config says q={cfg.data.q}")
            write_features(f, _feature_path(cfg, e.seq, f.frame_id))
            count += 1
        stream.write(f"fuse split={name} entry={e} frames={len(frames)}\n")
    stream.write(f"fuse wrote {count} feature files\n")
    return count


def _split_features(cfg: PipelineConfig, split: str):
    for e in cfg.splits()[split]:
        frames = _entry_frames(cfg, split, e)
        for t in _fused_ids(cfg, split, frames):
            path = _require(_feature_path(cfg, e.seq, t), "run fuse first")
            yield e.seq, t, read_features(path, cfg.data.q, t)


def cmd_train(cfg: PipelineConfig, stream=sys.stdout):
    tc = cfg.train_config()
    if not cfg.splits()["train"]:
        raise InvalidConfigError("no training sequences configured")
    remap = _remap(cfg)
    data = []
    for seq, t, fused in _split_features(cfg, "train"):
        labels = read_labels(_require(frame_paths(_seq_dir(cfg.root, seq), t)["labels"]),
                             cfg.data.q, remap)
        data.append((fused, labels))
    model, history = train(tc, data)
    save_model(model, cfg.out / "model.p2nm")
    atomic_write_text(cfg.out / "history.txt", format_history(history))
    stream.write(format_history(history))
    stream.write(f"train wrote {cfg.out / 'model.p2nm'}\n")
    return model, history


def cmd_refine(cfg: PipelineConfig, stream=sys.stdout) -> int:
    model = load_model(cfg.out / "model.p2nm")
    if model.q != cfg.data.q or (model.k and model.k != cfg.data.k):
        raise InvalidConfigError(f"model has q={model.q}, K={model.k}; "
                                 f"config has q={cfg.data.q}, K={cfg.data.k}")
    inv = inverse_remap(_remap(cfg))
    count = 0
    for split in ("val", "test"):
        for seq, t, fused in _split_features(cfg, split):
            probs, labels = refine(model, fused)
            out = _refined_dir(cfg, seq)
            write_scores(probs, frame_paths(out, t)["scores"])
            write_labels(LabelArray.from_mapped(labels, inv), frame_paths(out, t)["labels"])
            count += 1
    stream.write(f"refine wrote {count} frames\n")
    return count


def cmd_eval(cfg: PipelineConfig, stream=sys.stdout):
    split = cfg.eval.split
    entries = cfg.splits()[split]
    if not entries:
        raise InvalidConfigError(f"split {split!r} is empty")
    remap = _remap(cfg)
    pred_root = Path(cfg.eval.pred_root) if cfg.eval.pred_root else cfg.out / "refined"
    q = cfg.data.q
    jobs = []
    for e in entries:
        frames = _entry_frames(cfg, split, e)
        if not cfg.eval.pred_root:
            frames = _fused_ids(cfg, split, frames)
        for t in frames:
            jobs.append((e.seq, t))
    before, after = ConfusionMatrix.zeros(q), ConfusionMatrix.zeros(q)
    for seq, t in jobs:
        paths = frame_paths(_seq_dir(cfg.root, seq), t)
        gt = read_labels(_require(paths["labels"]), q, remap)
        base = np.argmax(read_scores(_require(paths["scores"])), axis=1)
        pred = read_labels(_require(frame_paths(_seq_dir(pred_root, seq), t)["labels"],
                                    "run refine first"), q, remap)
        before = accumulate(before, base, gt)
        after = accumulate(after, pred, gt)
        write_diff(diff_labels(pred, gt, base),
                   cfg.out / "eval" / "diff" / seq / f"{t:06d}.diff")
    rb = miou(before, strict=cfg.eval.strict)
    ra = miou(after, strict=cfg.eval.strict)
    names = {remap[raw]: name for name, raw in synth.CLASS_RAW_IDS.items() if raw in remap}
    atomic_write_text(cfg.out / "eval" / "before.txt", format_iou_report(rb))
    atomic_write_text(cfg.out / "eval" / "after.txt", format_iou_report(ra))
    comparison = format_delta_report(compare(rb, ra), rb, ra, names)
    atomic_write_text(cfg.out / "eval" / "comparison.txt", comparison)
    stream.write(comparison)
    return rb, ra


def _time_ms(fn):
    t0 = time.perf_counter()
    out = fn()
    return (time.perf_counter() - t0) * 1e3, out


def cmd_bench(cfg: PipelineConfig, stream=sys.stdout) -> list[dict]:
    """Per-stage timings on a generated scene, plus a nearest-neighbour sweep.

    Timings are reported, never asserted.
    """
    sc = cfg.scene_for("00")
    k = cfg.data.k
    frames_n = min(sc.frames, cfg.bench.frames + k)
    if frames_n < k + 1:
        raise InvalidConfigError("bench needs at least K+1 frames")
    sc = dataclasses.replace(sc, frames=frames_n)
    noise = _noise(cfg, sc)
    model_path = cfg.out / "model.p2nm"
    model = load_model(model_path) if model_path.exists() else init_model(cfg.data.q, k, cfg.run.seed)
    seq = synth.gen_sequence(sc)
    world = [apply_pose(s.frame, s.pose) for s in seq]
    scores = [synth.oracle_scores(s.frame, s.labels, s.occluded, noise, sc.q) for s in seq]
    predict(model, np.zeros((2, model.sizes[0]), dtype=np.float32))  # warm-up
    nn_ms, fuse_ms, refine_ms = [], [], []
    for t in range(k, frames_n):
        hist = [(world[t - u], scores[t - u]) for u in range(1, k + 1)]

        def search():
            for f, _ in hist:
                build_index(f, cfg.data.index).query_many(world[t].xyz, threads=cfg.threads)

        ms, _ = _time_ms(search)
        nn_ms.append(ms)
        ms, fused = _time_ms(lambda: _fuse(world[t], scores[t], hist,
                                           [build_index(f, cfg.data.index) for f, _ in hist],
                                           cfg.threads))
        fuse_ms.append(ms)
        ms, _ = _time_ms(lambda: predict(model, fused))
        refine_ms.append(ms)
    points = int(np.mean([len(s.frame) for s in seq]))
    stages = [
        {"stage": "nn_search", "ms_per_frame": float(np.mean(nn_ms))},
        {"stage": "fusion", "ms_per_frame": float(np.mean(fuse_ms))},
        {"stage": "refine", "ms_per_frame": float(np.mean(refine_ms))},
    ]
    lines = [f"stage={s['stage']} ms_per_frame={s['ms_per_frame']:.3f} frames={len(nn_ms)} "
             f"points={points} index={cfg.data.index} threads={cfg.threads}" for s in stages]
    sweep = bench_search(cfg.bench.knn_sizes, [cfg.bench.knn_queries], seed=cfg.run.seed,
                         kind=cfg.data.index)
    text = "\n".join(lines) + "\n" + format_report(sweep)
    atomic_write_text(cfg.out / "bench.txt", text)
    stream.write(text)
    return stages + sweep


HANDLERS = {"gen": cmd_gen, "fuse": cmd_fuse, "train": cmd_train, "refine": cmd_refine,
            "eval": cmd_eval, "bench": cmd_bench}


# ---------------------------------------------------------------------------
# Entry point
# ---------------------------------------------------------------------------


def _parse_overrides(extra: list[str]) -> list[tuple[str, str]]:
    out, i = [], 0
    while i < len(extra):
        tok = extra[i]
        if not tok.startswith("--") or len(tok) < 3:
            raise InvalidConfigError(f"unexpected argument {tok!r}")
        key, eq, value = tok[2:].partition("=")
        if not eq:
            if i + 1 >= len(extra):
                raise InvalidConfigError(f"flag {tok} needs a value")
            value = extra[i + 1]
            i += 1
        out.append((key, value))
        i += 1
    return out


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(
        prog="scanrefine",
        description="Refine per-point LiDAR class scores with cross-frame fused features.",
        epilog="Any config key can be overridden with --section.key VALUE (or --key VALUE "
               "when unambiguous).",
    )
    p.add_argument("command", choices=COMMANDS)
    p.add_argument("--config", help="key=value config file with [section] headers")
    p.add_argument("--seed", help="master seed")
    p.add_argument("--threads", help="worker cap for BLAS and neighbour search")
    p.add_argument("--deterministic", action="store_true", help="force serial reductions")
    p.add_argument("--out", help="output directory")
    p.add_argument("-v", "--verbose", action="store_true")
    return p


def load_config(args, extra) -> PipelineConfig:
    overrides = []
    for key in ("seed", "threads", "out"):
        if getattr(args, key) is not None:
            overrides.append((f"run.{key}", getattr(args, key)))
    if args.deterministic:
        overrides.append(("run.deterministic", "true"))
    overrides += _parse_overrides(extra)
    return PipelineConfig.load(args.config, overrides)


def main(argv=None, stdout=None, stderr=None) -> int:
    stdout = stdout or sys.stdout
    stderr = stderr or sys.stderr
    parser = build_parser()
    args, extra = parser.parse_known_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s", stream=stderr)
    try:
        cfg = load_config(args, extra)
        _echo(cfg, args.command, stdout)
        with _thread_limit(cfg):
            HANDLERS[args.command](cfg, stdout)
    except ScanRefineError as exc:
        stderr.write(f"scanrefine {args.command}: error: {exc}\n")
        return exc.exit_code
    except OSError as exc:
        stderr.write(f"scanrefine {args.command}: I/O error: {exc}\n")
        return 1
    return 0


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
