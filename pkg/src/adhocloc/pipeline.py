"""Dataset synthesis, training, evaluation and ablation."""
from __future__ import annotations

import csv
import json
import logging
import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .acoustics import (SPEED_OF_SOUND, Scene, ScenePoint, match_reflection, read_wav,
                        render_scene, write_wav)
from .dsp import StftConfig, extract_features
from .grid import GridSpec, RoomDims, area_bounds, area_center, area_centers, one_hot
from .model import ModelConfig, config_path_for, forward_probs, init_params, predict_from_probs
from .sources import corpus_segments, load_segment, synthetic_speech

log = logging.getLogger(__name__)

MANIFEST_NAME = "manifest.jsonl"


class ConfigError(ValueError):
    pass


# -- dataset synthesis ----------------------------------------------------------

@dataclass
class DatasetSpec:
    rooms: list[RoomDims]
    m_x: int
    m_y: int
    nodes_per_scene: int
    positions_per_area: int = 1
    t60_range: tuple[float, float] = (0.3, 1.0)
    snr_range: tuple[float, float] = (20.0, 50.0)
    segment_seconds: float = 2.0
    sample_rate: int = 16000
    source_corpus: str = "synthetic"
    seed: int = 0
    height_range: tuple[float, float] = (1.0, 2.0)
    speed_of_sound: float = SPEED_OF_SOUND

    def __post_init__(self):
        if not self.rooms:
            raise ConfigError("at least one room is required")
        for name in ("t60_range", "snr_range", "height_range"):
            lo, hi = getattr(self, name)
            if lo > hi:
                raise ConfigError(f"{name} must be ordered, got [{lo}, {hi}]")
        m_total = self.m_x * self.m_y
        if not 1 <= self.nodes_per_scene <= m_total:
            raise ConfigError(f"{self.nodes_per_scene} nodes cannot occupy distinct areas of a "
                              f"{self.m_x}x{self.m_y} grid (M={m_total})")
        if self.positions_per_area < 1:
            raise ConfigError("positions_per_area must be at least 1")
        if self.segment_seconds < 2.0:
            raise ConfigError("segments shorter than 2 s are not supported")
        if self.t60_range[0] <= 0:
            raise ConfigError("t60 must be positive")

    def grid(self, room: RoomDims) -> GridSpec:
        return GridSpec(room, self.m_x, self.m_y)

    @property
    def n_samples(self) -> int:
        return len(self.rooms) * self.m_x * self.m_y * self.positions_per_area


def _sample_seed(seed: int, index: int) -> int:
    return int(np.random.SeedSequence([seed, index]).generate_state(1)[0])


def _uniform_in_area(rng, grid, m, heights):
    x0, x1, y0, y1 = area_bounds(m, grid)
    return ScenePoint(float(rng.uniform(x0, x1)), float(rng.uniform(y0, y1)),
                      float(rng.uniform(*heights)))


def _plan(spec: DatasetSpec):
    i = 0
    for r, room in enumerate(spec.rooms):
        for m in range(1, spec.m_x * spec.m_y + 1):
            for j in range(spec.positions_per_area):
                yield i, r, room, m, j
                i += 1


def _synthesize_one(args):
    spec, out_dir, segments, (i, r, room, area, rep) = args
    grid = spec.grid(room)
    seed = _sample_seed(spec.seed, i)
    rng = np.random.default_rng(seed)
    fs = spec.sample_rate
    n_src = int(round(spec.segment_seconds * fs))
    speaker = _uniform_in_area(rng, grid, area, spec.height_range)
    node_areas = sorted(int(a) + 1 for a in rng.choice(grid.m_total, spec.nodes_per_scene,
                                                       replace=False))
    nodes = []
    for a in node_areas:
        p = _uniform_in_area(rng, grid, a, spec.height_range)
        while math.dist((p.x, p.y, p.z), (speaker.x, speaker.y, speaker.z)) < 0.05:
            p = _uniform_in_area(rng, grid, a, spec.height_range)
        nodes.append(p)
    t60 = float(rng.uniform(*spec.t60_range))
    snr = float(rng.uniform(*spec.snr_range))
    if segments is None:
        src_seed = int(rng.integers(2 ** 31))
        source = synthetic_speech(n_src, fs, seed=src_seed)
        source_id = f"synthetic:{src_seed}"
    else:
        rel, start = segments[int(rng.integers(len(segments)))]
        source = load_segment(spec.source_corpus, rel, start, fs, spec.segment_seconds)
        source_id = f"{rel}@{start}"
    noise_seed = int(rng.integers(2 ** 31))
    scene = Scene(room, nodes, speaker, t60, snr, fs, source_id)
    sample = render_scene(scene, source, grid, seed=noise_seed, c=spec.speed_of_sound)
    sample_id = f"{i:06d}"
    paths = []
    for k, ch in enumerate(sample.waves.channels):
        rel = f"audio/{sample_id}_n{k:02d}.wav"
        try:
            write_wav(out_dir / rel, ch, fs)
        except OSError as exc:
            raise OSError(f"writing {out_dir / rel}: {exc}") from exc
        paths.append(rel)
    return {
        "sample_id": sample_id,
        "room": room.to_dict(),
        "grid": {"m_x": spec.m_x, "m_y": spec.m_y},
        "node_areas": sample.node_areas,
        "node_xyz": [[p.x, p.y, p.z] for p in nodes],
        "speaker_area": sample.speaker_area,
        "speaker_xyz": [speaker.x, speaker.y, speaker.z],
        "t60": t60,
        "snr_db": snr,
        "snr_node": sample.meta["snr_node"],
        "beta": match_reflection(room, t60, fs, spec.speed_of_sound),
        "audio_paths": paths,
        "sample_rate": fs,
        "source_id": source_id,
        "seed": seed,
    }


def synthesize_dataset(spec: DatasetSpec, out_dir, threads: int = 1, progress=None) -> Path:
    """Render every (room, area, repetition) scene and write audio plus a JSON-lines manifest.

    Each sample draws from its own seed derived from ``spec.seed`` and its index,
    so the output does not depend on ``threads``.
    """
    out_dir = Path(out_dir)
    if not out_dir.is_dir():
        raise FileNotFoundError(f"output directory {out_dir} does not exist")
    (out_dir / "audio").mkdir(exist_ok=True)
    segments = None
    if spec.source_corpus != "synthetic":
        segments = corpus_segments(spec.source_corpus, spec.sample_rate, spec.segment_seconds)
        if not segments:
            raise ConfigError(f"no segments of {spec.segment_seconds} s in {spec.source_corpus}")
    jobs = [(spec, out_dir, segments, item) for item in _plan(spec)]
    if threads > 1:
        with ProcessPoolExecutor(max_workers=threads) as pool:
            records = list(pool.map(_synthesize_one, jobs, chunksize=4))
    else:
        records = []
        for job in jobs:
            records.append(_synthesize_one(job))
            if progress:
                progress(len(records), len(jobs))
    manifest = out_dir / MANIFEST_NAME
    write_manifest(manifest, records)
    return manifest


def write_manifest(path, records):
    with open(path, "w") as f:
        for rec in records:
            f.write(json.dumps(rec, sort_keys=True) + "\n")


def read_manifest(path) -> list[dict]:
    path = Path(path)
    if not path.is_file():
        raise FileNotFoundError(f"manifest {path} does not exist")
    with open(path) as f:
        return [json.loads(line) for line in f if line.strip()]


def record_grid(rec) -> GridSpec:
    return GridSpec.from_dict({**rec["room"], **rec["grid"]})


def manifest_m_total(records) -> int:
    ms = {r["grid"]["m_x"] * r["grid"]["m_y"] for r in records}
    if len(ms) != 1:
        raise ConfigError(f"manifest mixes grids with M in {sorted(ms)}")
    return ms.pop()


def load_waves(rec, root) -> np.ndarray:
    root = Path(root)
    fs = rec.get("sample_rate")
    return np.stack([read_wav(root / p, expected_rate=fs)[0] for p in rec["audio_paths"]])


# -- model inputs ---------------------------------------------------------------

def normalize_features(feats: np.ndarray) -> np.ndarray:
    """Scale a sample's features by one global RMS, keeping inter-node level ratios."""
    rms = float(np.sqrt(np.mean(np.square(feats, dtype=np.float64))))
    return feats / rms if rms > 0 else feats


def sample_onehots(rec, node_idx=None, dtype=np.float32) -> np.ndarray:
    areas = np.asarray(rec["node_areas"])
    if node_idx is not None:
        areas = areas[node_idx]
    g = record_grid(rec)
    return np.stack([one_hot(int(a), g, dtype) for a in areas])


def sample_inputs(rec, root, stft_cfg: StftConfig, node_idx=None, dtype=np.float32):
    """``(one_hots (N, M), features (N, 2F, T))`` for a manifest record."""
    waves = load_waves(rec, root)
    onehots = sample_onehots(rec, node_idx, dtype)
    if node_idx is not None:
        waves = waves[node_idx]
    feats = normalize_features(extract_features(waves, stft_cfg, dtype=np.float64).data)
    return onehots, feats.astype(dtype)


# -- training -------------------------------------------------------------------

@dataclass
class TrainConfig:
    epochs: int = 20
    lr: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    batch_size: int = 1
    seed: int = 0
    val_fraction: float = 0.1
    crop_frames: int = 0  # 0 keeps every frame
    max_steps: int = 0  # 0 means no limit


@dataclass
class TrainResult:
    checkpoint: Path
    losses: list[float]
    val_history: list[dict] = field(default_factory=list)
    best_val_accuracy: float | None = None
    init_loss: float | None = None


def split_indices(n: int, val_fraction: float, seed: int):
    """Seeded train/validation split; validation is empty for tiny sets."""
    perm = np.random.default_rng([seed, 7]).permutation(n)
    n_val = int(round(n * val_fraction)) if n >= 10 else 0
    return np.sort(perm[n_val:]), np.sort(perm[:n_val])


def _checkpoint_state_path(path) -> Path:
    path = Path(path)
    return path.with_name(path.name + ".state.json")


def last_checkpoint_path(path) -> Path:
    path = Path(path)
    return path.with_name(path.name + ".last")


def save_model(params, cfg: ModelConfig, path, state: dict | None = None):
    ad.save_checkpoint(params, path)
    cfg.save(config_path_for(path))
    if state is not None:
        _checkpoint_state_path(path).write_text(json.dumps(state, sort_keys=True))


def load_model(path, cfg: ModelConfig | None = None):
    """Parameters and config of a checkpoint; ``cfg`` must agree with the stored one."""
    path = Path(path)
    if not path.is_file():
        raise FileNotFoundError(f"checkpoint {path} does not exist")
    stored = ModelConfig.load(config_path_for(path))
    if cfg is not None and cfg != stored:
        raise ConfigError(f"checkpoint {path} was trained with a different model config")
    params = ad.load_checkpoint(path, init_params(stored, seed=0))
    return params, stored


def _batches(indices, batch_size, rng):
    order = rng.permutation(indices)
    return [order[i:i + batch_size] for i in range(0, len(order), batch_size)]


def _feature_rms(waves, stft_cfg: StftConfig) -> float:
    feats = extract_features(waves, stft_cfg, dtype=np.float64).data
    return float(np.sqrt(np.mean(np.square(feats))))


def _batch_inputs(records, batch, root, stft_cfg: StftConfig, crop_frames: int, rng, rms_cache: dict):
    """Stacked inputs for one step.

    With ``crop_frames`` set, one random window is shared by the batch and only that
    window is transformed. Features are still scaled by the RMS over every frame, so
    the result equals cropping the full normalised features.
    """
    recs = [records[i] for i in batch]
    waves = [load_waves(r, root) for r in recs]
    if len({w.shape for w in waves}) != 1:
        raise ConfigError("samples in a batch differ in node count or length; use batch_size=1")
    n_frames = stft_cfg.n_frames(waves[0].shape[1])
    onehots = np.stack([sample_onehots(r) for r in recs])
    if not crop_frames or n_frames <= crop_frames:
        feats = np.stack([normalize_features(extract_features(w, stft_cfg,
                                                              dtype=np.float64).data)
                          for w in waves])
        return onehots, feats.astype(np.float32)
    t0 = int(rng.integers(n_frames - crop_frames + 1))
    lo = t0 * stft_cfg.hop
    hi = (t0 + crop_frames - 1) * stft_cfg.hop + stft_cfg.fft_size
    feats = []
    for key, w in zip(batch, waves):
        if key not in rms_cache:
            rms_cache[key] = _feature_rms(w, stft_cfg)
        f = extract_features(w[:, lo:hi], stft_cfg, dtype=np.float64).data
        rms = rms_cache[key]
        feats.append(f / rms if rms > 0 else f)
    return onehots, np.stack(feats).astype(np.float32)


def train(manifest, model_cfg: ModelConfig, train_cfg: TrainConfig, checkpoint,
          stft_cfg: StftConfig = StftConfig(), log_path=None, resume: bool = False,
          progress=None) -> TrainResult:
    """Minimise frame-averaged cross-entropy with Adam; keep the best-by-validation model.

    Writes ``checkpoint`` (best), ``checkpoint.last`` (for resuming) and an
    optional CSV log of ``step, loss, val_accuracy, val_mae``.
    """
    manifest = Path(manifest)
    root = manifest.parent
    records = read_manifest(manifest)
    m = manifest_m_total(records)
    if m != model_cfg.m_total:
        raise ConfigError(f"manifest grid has M={m} areas but the model config has "
                          f"m_total={model_cfg.m_total}")
    if stft_cfg.n_features != model_cfg.n_features:
        raise ConfigError(f"STFT gives {stft_cfg.n_features} features but the node encoder "
                          f"expects {model_cfg.n_features}")
    checkpoint = Path(checkpoint)
    last = last_checkpoint_path(checkpoint)
    tr_idx, va_idx = split_indices(len(records), train_cfg.val_fraction, train_cfg.seed)

    params = init_params(model_cfg, seed=train_cfg.seed)
    start_epoch, step, best = 0, 0, None
    if resume:
        params, _ = load_model(last, model_cfg)
        state = json.loads(_checkpoint_state_path(last).read_text())
        start_epoch, step, best = state["epoch"], state["step"], state["best_val_accuracy"]

    log_rows = []
    if log_path is not None and resume and Path(log_path).exists():
        with open(log_path) as f:
            log_rows = [row for row in csv.reader(f)][1:]

    losses, val_history = [], []
    init_loss = None
    rms_cache: dict[int, float] = {}
    for epoch in range(start_epoch, train_cfg.epochs):
        rng = np.random.default_rng([train_cfg.seed, epoch])
        for batch in _batches(tr_idx, train_cfg.batch_size, rng):
            if train_cfg.max_steps and step >= train_cfg.max_steps:
                break
            onehots, feats = _batch_inputs(records, batch, root, stft_cfg,
                                           train_cfg.crop_frames, rng, rms_cache)
            g = record_grid(records[batch[0]])
            targets = np.stack([one_hot(records[i]["speaker_area"], g) for i in batch])
            loss = ad.cross_entropy(forward_probs(onehots, feats, params, model_cfg), targets)
            loss.backward()
            ad.adam_step(params, train_cfg.lr, train_cfg.beta1, train_cfg.beta2, train_cfg.eps)
            step += 1
            value = float(loss.data)
            if init_loss is None:
                init_loss = value
            losses.append(value)
            log_rows.append([step, f"{value:.6g}", "", ""])
            if progress:
                progress(epoch, step, value)
        entry = {"epoch": epoch + 1, "step": step}
        if len(va_idx):
            rep = evaluate_records([records[i] for i in va_idx], root, params, model_cfg, stft_cfg)
            entry.update(val_accuracy=rep.accuracy, val_mae=rep.mae_meters)
            log_rows.append([step, "", f"{rep.accuracy:.6g}", f"{rep.mae_meters:.6g}"])
            log.info("epoch %d: val accuracy %.4f, MAE %.4f m", epoch + 1, rep.accuracy,
                     rep.mae_meters)
            improved = best is None or rep.accuracy > best
        else:
            improved = True
        val_history.append(entry)
        if improved:
            best = entry.get("val_accuracy", best)
            save_model(params, model_cfg, checkpoint)
        save_model(params, model_cfg, last,
                   {"epoch": epoch + 1, "step": step, "best_val_accuracy": best})
        if train_cfg.max_steps and step >= train_cfg.max_steps:
            break
    if not checkpoint.exists():
        save_model(params, model_cfg, checkpoint)
    if log_path is not None:
        with open(log_path, "w", newline="") as f:
            w = csv.writer(f)
            w.writerow(["step", "loss", "val_accuracy", "val_mae"])
            w.writerows(log_rows)
    return TrainResult(checkpoint, losses, val_history, best, init_loss)


# -- evaluation -----------------------------------------------------------------

@dataclass
class EvalReport:
    mae_meters: float
    accuracy: float
    node_count: int | None
    n_samples: int
    per_room: dict = field(default_factory=dict)

    def rows(self):
        yield ("all", self.n_samples, self.mae_meters, self.accuracy)
        for room, d in sorted(self.per_room.items()):
            yield (room, d["n_samples"], d["mae_meters"], d["accuracy"])


def _room_key(rec) -> str:
    r = rec["room"]
    return "x".join(f"{r[k]:g}" for k in ("x_len", "y_len", "z_len"))


def subset_nodes(n_nodes: int, n_keep: int | None, seed: int, index: int):
    """Seeded uniform choice of ``n_keep`` of ``n_nodes`` nodes; ``None`` keeps all."""
    if n_keep is None or n_keep == n_nodes:
        return None
    if not 1 <= n_keep <= n_nodes:
        raise ConfigError(f"cannot select {n_keep} of {n_nodes} nodes")
    rng = np.random.default_rng([seed, index, 11])
    return np.sort(rng.choice(n_nodes, n_keep, replace=False))


def evaluate_records(records, root, params=None, cfg: ModelConfig | None = None,
                     stft_cfg: StftConfig = StftConfig(), node_subset: int | None = None,
                     seed: int = 0, oracle: bool = False, batch_size: int = 16) -> EvalReport:
    errors, hits, rooms = [], [], []
    decided_all = []
    pending = []

    def flush():
        onehots = np.stack([p[1] for p in pending])
        feats = np.stack([p[2] for p in pending])
        probs = forward_probs(onehots, feats, params, cfg).data
        for (i, _, _), pr in zip(pending, probs):
            decided_all.append((i, predict_from_probs(pr).decided))
        pending.clear()

    for i, rec in enumerate(records):
        if oracle:
            decided_all.append((i, int(rec["speaker_area"])))
            continue
        idx = subset_nodes(len(rec["node_areas"]), node_subset, seed, i)
        onehots, feats = sample_inputs(rec, root, stft_cfg, idx, dtype=params.dtype)
        if pending and (pending[0][2].shape != feats.shape or len(pending) >= batch_size):
            flush()
        pending.append((i, onehots, feats))
    if pending:
        flush()

    for i, decided in decided_all:
        rec = records[i]
        g = record_grid(rec)
        cx, cy = area_center(decided, g)
        sx, sy = rec["speaker_xyz"][:2]
        errors.append(math.hypot(sx - cx, sy - cy))
        hits.append(decided == int(rec["speaker_area"]))
        rooms.append(_room_key(rec))
    errors, hits = np.array(errors), np.array(hits, dtype=float)
    per_room = {}
    for room in sorted(set(rooms)):
        sel = np.array([r == room for r in rooms])
        per_room[room] = {"n_samples": int(sel.sum()), "mae_meters": float(errors[sel].mean()),
                          "accuracy": float(hits[sel].mean())}
    n_nodes = node_subset if node_subset is not None else (
        len(records[0]["node_areas"]) if records else None)
    return EvalReport(float(errors.mean()) if len(errors) else float("nan"),
                      float(hits.mean()) if len(hits) else float("nan"),
                      n_nodes, len(records), per_room)


def evaluate(manifest, checkpoint=None, node_subset: int | None = None, seed: int = 0,
             stft_cfg: StftConfig = StftConfig(), oracle: bool = False) -> EvalReport:
    manifest = Path(manifest)
    records = read_manifest(manifest)
    if node_subset is not None:
        n_min = min(len(r["node_areas"]) for r in records)
        if node_subset > n_min:
            raise ConfigError(f"node subset {node_subset} exceeds the {n_min} nodes per scene")
    if oracle:
        return evaluate_records(records, manifest.parent, oracle=True, node_subset=node_subset)
    params, cfg = load_model(checkpoint)
    m = manifest_m_total(records)
    if m != cfg.m_total:
        raise ConfigError(f"checkpoint predicts {cfg.m_total} areas but the manifest grid has {m}")
    return evaluate_records(records, manifest.parent, params, cfg, stft_cfg, node_subset, seed)


def oracle_center_error(records) -> float:
    """Mean distance from each true speaker position to the centre of its own cell."""
    d = []
    for rec in records:
        g = record_grid(rec)
        c = area_centers(g)[int(rec["speaker_area"]) - 1]
        d.append(math.hypot(rec["speaker_xyz"][0] - c[0], rec["speaker_xyz"][1] - c[1]))
    return float(np.mean(d))


@dataclass
class AblationRow:
    label: str
    mae_meters: float
    accuracy: float
    n_samples: int


def ablate(entries, stft_cfg: StftConfig = StftConfig()) -> list[AblationRow]:
    """Evaluate ``(label, manifest, checkpoint, node_subset, seed)`` entries in order."""
    rows = []
    for label, manifest, checkpoint, node_subset, seed in entries:
        if checkpoint is None or not Path(checkpoint).is_file():
            raise FileNotFoundError(f"checkpoint {checkpoint} for {label!r} does not exist")
        rep = evaluate(manifest, checkpoint, node_subset, seed, stft_cfg)
        rows.append(AblationRow(label, rep.mae_meters, rep.accuracy, rep.n_samples))
    return rows


def format_table(rows, headers) -> str:
    cells = [[str(h) for h in headers]] + [
        [f"{v:.4f}" if isinstance(v, float) else str(v) for v in row] for row in rows]
    widths = [max(len(r[i]) for r in cells) for i in range(len(headers))]
    lines = ["  ".join(c.rjust(w) for c, w in zip(r, widths)) for r in cells]
    lines.insert(1, "  ".join("-" * w for w in widths))
    return "\n".join(lines)
