"""Staged training pipeline: teacher-matching pretraining, joint contrastive
pretraining, supervised fine-tuning, plus evaluation and single-clip inference.

Every stage is deterministic given (seed, config, data): batch order,
augmentation draws, and substitution decisions all derive from the seed.
Metrics stream as JSON lines to stdout and `<run_dir>/metrics.jsonl`; a CSV
and matplotlib figures are rendered into the run directory at the end.
"""
from __future__ import annotations

import json
import logging
import time
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

import numpy as np

from . import data as D
from . import frontend as fe
from . import losses as L
from . import tensor as T
from .augment import derive_rng
from .errors import ContractViolation
from .model import ModelConfig, TCANet
from .tensor import Tensor

log = logging.getLogger(__name__)

STAGES = ("wvc", "lgcsiam", "finetune")
_DEFAULT_EPOCHS = {"wvc": 30, "lgcsiam": 30, "finetune": 60}


@dataclass
class TrainConfig:
    stage: str = "finetune"
    data_root: str = ""
    teacher_store: str | None = None
    run_dir: str = "runs/run"
    batch: int = 128
    lr0: float = 0.1
    momentum: float = 0.9
    weight_decay: float = 1e-4
    lr_decay_factor: float = 3.0
    patience_epochs: int = 3
    max_epochs: int | None = None          # stage default when None
    min_lr: float = 1e-4
    seed: int = 0
    label_fraction: float = 1.0
    unknown_rate: float = 0.1
    silence_rate: float = 0.1
    missing_teacher: str = "fatal"
    symmetric_local: bool = False
    augment: bool = True                   # False: identity views (capacity tests)
    log_augment: bool = False
    figures: bool = True
    echo_metrics: bool = True              # False: write JSONL only, no stdout
    eval_batch: int = 256
    resume: str | None = None              # full-state resume of the same stage
    weights: L.LossWeights = field(default_factory=L.LossWeights)
    model: ModelConfig = field(default_factory=ModelConfig)

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        d = dict(d)
        w = d.pop("weights", {})
        m = d.pop("model", {})
        cfg = cls(**d)
        cfg.weights = L.LossWeights(**w) if isinstance(w, dict) else w
        cfg.model = ModelConfig(**m) if isinstance(m, dict) else m
        return cfg

    @classmethod
    def from_json(cls, path) -> "TrainConfig":
        return cls.from_dict(json.loads(Path(path).read_text()))

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class TrainReport:
    stage: str
    seed: int
    epochs: list[dict] = field(default_factory=list)
    final_test_accuracy: float | None = None
    best_val: float | None = None
    best_checkpoint: str | None = None
    last_checkpoint: str | None = None

    def to_dict(self) -> dict:
        return asdict(self)

    def save(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=2))


class PlateauSchedule:
    """Divide the LR by `factor` whenever `patience` consecutive epochs fail
    to beat the best validation metric."""

    def __init__(self, lr0: float, factor: float = 3.0, patience: int = 3,
                 mode: str = "max"):
        if patience < 1:
            raise ContractViolation("patience must be >= 1")
        self.lr0 = lr0
        self.factor = factor
        self.patience = patience
        self.mode = mode
        self.best: float | None = None
        self.stale = 0
        self.decays = 0

    @property
    def lr(self) -> float:
        return self.lr0 / self.factor ** self.decays

    def improved(self, metric: float) -> bool:
        if self.best is None:
            return True
        return metric > self.best if self.mode == "max" else metric < self.best

    def update(self, metric: float) -> float:
        if self.improved(metric):
            self.best = metric
            self.stale = 0
        else:
            self.stale += 1
            if self.stale >= self.patience:
                self.decays += 1
                self.stale = 0
        return self.lr


def lr_schedule(current_lr: float, val_history, factor: float = 3.0,
                patience: int = 3, mode: str = "max") -> float:
    """Replay a validation-metric history through the plateau rule."""
    sched = PlateauSchedule(current_lr, factor, patience, mode)
    for v in val_history:
        sched.update(v)
    return sched.lr


# -- stage plumbing ------------------------------------------------------------


def _term_weights(stage: str, w: L.LossWeights) -> tuple[float, float, float]:
    """(ce, contrastive, teacher) weights for a stage."""
    if stage == "wvc":
        return 0.0, 0.0, 1.0
    if stage == "lgcsiam":
        return 0.0, w.lambda1, w.lambda2
    return w.gamma1, w.gamma2, w.gamma3


def _batch_mode(stage: str, w: L.LossWeights) -> tuple[str, bool]:
    """(batch mode, labeled) for a stage under its effective weights."""
    ce_w, lgc_w, wvc_w = _term_weights(stage, w)
    if ce_w == 0:
        if lgc_w == 0:
            return "wvc", False
        return ("joint" if wvc_w > 0 else "siamese"), False
    if lgc_w > 0 and wvc_w > 0:
        return "joint", True
    if lgc_w > 0:
        return "siamese", True
    if wvc_w > 0:
        return "joint", True  # clean view + teacher needed alongside the CE view
    return "supervised", True


def _trainable_sections(stage: str, w: L.LossWeights) -> set[str]:
    ce_w, lgc_w, wvc_w = _term_weights(stage, w)
    if ce_w == 0 and lgc_w == 0:
        return {"encoder", "wvc_head"}
    secs = {"encoder", "decoder"}
    if ce_w > 0:
        secs.add("classifier")
    if lgc_w > 0:
        secs.add("siam_head")
    if wvc_w > 0:
        secs.add("wvc_head")
    return secs


def one_hot(labels: np.ndarray, n_classes: int) -> np.ndarray:
    return np.eye(n_classes, dtype=np.float32)[labels]


def compute_stage_loss(model: TCANet, batch: D.Batch, cfg: TrainConfig,
                       stage: str, train: bool = True):
    """Weighted stage objective plus per-component values for logging."""
    w = cfg.weights
    ce_w, lgc_w, wvc_w = _term_weights(stage, w)
    comps: dict[str, float] = {}
    ce = lgc = wvc = 0.0
    d1 = None
    if ce_w > 0 or lgc_w > 0:
        d1 = model.decoder_forward(model.encoder_forward(Tensor(batch.x1), train))
    if ce_w > 0:
        probs = model.classify(d1)
        ce = L.cross_entropy(probs, one_hot(batch.labels, model.cfg.n_classes))
        comps["ce"] = ce.item()
    if lgc_w > 0:
        d2 = model.decoder_forward(model.encoder_forward(Tensor(batch.x2), train))
        p1, p2 = model.siam_projection(d1), model.siam_projection(d2)
        g = L.global_loss(p1, p2)
        lo = L.local_loss(p1, p2, w.tau, cfg.symmetric_local)
        lgc = T.add(g, lo)
        comps["global"] = g.item()
        comps["local"] = lo.item()
        comps["lgcsiam"] = lgc.item()
    if wvc_w > 0:
        if batch.teacher is None:
            comps["wvc"] = 0.0   # nothing in this batch has teacher coverage
        else:
            clean = batch.clean
            if batch.teacher_rows is not None and len(batch.teacher_rows) < len(clean):
                clean = clean[batch.teacher_rows]
            ec = model.encoder_forward(Tensor(clean), train)
            proj = model.wvc_projection(ec)
            frames = D.align_frames(proj.shape[1], batch.teacher.shape[1])
            wvc = L.wvc_loss(T.narrow(proj, 1, 0, frames),
                             Tensor(batch.teacher[:, :frames]))
            comps["wvc"] = wvc.item()
    if stage == "wvc":
        loss = wvc
    elif stage == "lgcsiam":
        loss = L.pretrain_loss(lgc, wvc, w)
    else:
        loss = L.finetune_loss(ce, lgc, wvc, w)
    comps["loss"] = loss.item()
    return loss, comps


def select_label_subset(manifest: D.DatasetManifest, fraction: float,
                        seed: int) -> list[int]:
    """Stratified labeled subset of the train split (word classes 0-10)."""
    if not (0.0 < fraction <= 1.0):
        raise ContractViolation(f"label_fraction must be in (0,1], got {fraction}")
    rng = derive_rng(seed, "label-subset")
    chosen: list[int] = []
    for cls in range(D.UNKNOWN_INDEX + 1):
        pool = [i for i in manifest.word_indices("train")
                if manifest.entries[i].class_index == cls]
        if not pool:
            if cls < D.UNKNOWN_INDEX:
                log.warning("label subset: class %r has no train samples",
                            D.CLASS_NAMES[cls])
            continue
        k = max(1, round(fraction * len(pool)))
        picks = rng.permutation(len(pool))[:k]
        chosen.extend(pool[i] for i in picks)
    return sorted(chosen)


# -- checkpoints -----------------------------------------------------------------

_CFG_INT_FIELDS = ("n_mels", "frames", "channels", "n_layers", "first_kernel",
                   "kernel", "n_classes", "num_heads", "wvc_hidden", "wvc_dim",
                   "siam_hidden", "siam_dim")


def save_training_checkpoint(path, model: TCANet,
                             opt: T.OptimizerState | None = None,
                             sched: PlateauSchedule | None = None,
                             epoch: int = 0) -> None:
    arrays = model.state_arrays()
    for name, cfgval in [(f, getattr(model.cfg, f)) for f in _CFG_INT_FIELDS]:
        arrays[f"meta.cfg.{name}"] = np.array(float(cfgval), dtype=np.float32)
    arrays["meta.cfg.sqrt_scaling"] = np.array(float(model.cfg.sqrt_scaling), dtype=np.float32)
    arrays["meta.epoch"] = np.array(float(epoch), dtype=np.float32)
    if opt is not None:
        for name, v in opt.velocity.items():
            arrays[f"opt.v.{name}"] = v if v is not None else np.zeros_like(model.params[name].data)
    if sched is not None:
        arrays["meta.sched.decays"] = np.array(float(sched.decays), dtype=np.float32)
        arrays["meta.sched.stale"] = np.array(float(sched.stale), dtype=np.float32)
        arrays["meta.sched.has_best"] = np.array(float(sched.best is not None), dtype=np.float32)
        arrays["meta.sched.best"] = np.array(
            float(sched.best if sched.best is not None else 0.0), dtype=np.float32)
    T.save_checkpoint(path, arrays)


def load_model(path) -> tuple[TCANet, dict[str, np.ndarray]]:
    """Rebuild the model from a checkpoint; returns (model, raw arrays)."""
    arrays = T.load_checkpoint(path)
    kwargs = {f: int(arrays[f"meta.cfg.{f}"].reshape(())) for f in _CFG_INT_FIELDS
              if f"meta.cfg.{f}" in arrays}
    kwargs["sqrt_scaling"] = bool(arrays.get("meta.cfg.sqrt_scaling", np.zeros(1)).reshape(()))
    model = TCANet(ModelConfig(**kwargs))
    model.load_state_arrays(arrays, strict=True)
    return model, arrays


# -- training loop -----------------------------------------------------------------


class _MetricsLog:
    def __init__(self, run_dir: Path, append: bool = False, echo: bool = True):
        run_dir.mkdir(parents=True, exist_ok=True)
        self.path = run_dir / "metrics.jsonl"
        self._f = open(self.path, "a" if append else "w")
        self.echo = echo

    def write(self, line: dict) -> None:
        s = json.dumps(line)
        self._f.write(s + "\n")
        self._f.flush()
        if self.echo:
            print(s, flush=True)

    def close(self):
        self._f.close()


def _run_stage(cfg: TrainConfig, stage: str,
               init_checkpoint=None) -> tuple[Path, TrainReport]:
    if stage not in STAGES:
        raise ContractViolation(f"unknown stage {stage!r}")
    run_dir = Path(cfg.run_dir)
    metrics = _MetricsLog(run_dir, append=cfg.resume is not None,
                          echo=cfg.echo_metrics)
    manifest = D.load_dataset(cfg.data_root)
    mode, labeled = _batch_mode(stage, cfg.weights)

    store = None
    if mode in ("wvc", "joint"):
        if not cfg.teacher_store:
            raise ContractViolation(f"stage {stage!r} needs --teacher-store")
        store = D.TeacherStore(cfg.teacher_store)

    # model + optimizer state
    start_epoch = 0
    sched = PlateauSchedule(cfg.lr0, cfg.lr_decay_factor, cfg.patience_epochs,
                            mode="max" if stage == "finetune" else "min")
    if cfg.resume:
        model, arrays = load_model(cfg.resume)
        start_epoch = int(arrays["meta.epoch"].reshape(()))
        sched.decays = int(arrays.get("meta.sched.decays", np.zeros(1)).reshape(()))
        sched.stale = int(arrays.get("meta.sched.stale", np.zeros(1)).reshape(()))
        if arrays.get("meta.sched.has_best", np.zeros(1)).reshape(()):
            sched.best = float(arrays["meta.sched.best"].reshape(()))
    elif init_checkpoint:
        model, _ = load_model(init_checkpoint)
    else:
        model = TCANet(cfg.model, seed=cfg.seed)

    trainable = model.param_names(_trainable_sections(stage, cfg.weights))
    opt = T.OptimizerState(trainable, lr=sched.lr, momentum=cfg.momentum,
                           weight_decay=cfg.weight_decay)
    if cfg.resume:
        arrays_v = T.load_checkpoint(cfg.resume)
        for name in trainable:
            key = f"opt.v.{name}"
            if key in arrays_v:
                opt.velocity[name] = arrays_v[key].copy()

    # data pools
    sink = None
    if cfg.log_augment:
        aug_log = open(run_dir / "augment.jsonl", "a", buffering=1)
        sink = lambda rec: aug_log.write(json.dumps(rec) + "\n")
    if stage == "finetune":
        subset = select_label_subset(manifest, cfg.label_fraction, cfg.seed)
        train_idx = [i for i in subset
                     if manifest.entries[i].class_index < D.UNKNOWN_INDEX]
        unknown_pool = [i for i in subset
                        if manifest.entries[i].class_index == D.UNKNOWN_INDEX]
    else:
        train_idx = manifest.word_indices("train")
        unknown_pool = None
    if not train_idx:
        raise ContractViolation("no training utterances selected")
    val_idx = manifest.word_indices("val")

    augment_cfg = None
    if not cfg.augment:
        augment_cfg = D.BatchBuilder._default_augment(manifest)
        augment_cfg.apply_prob = 0.0
    builder = D.BatchBuilder(manifest, augment_cfg=augment_cfg,
                             teacher_store=store,
                             unknown_rate=cfg.unknown_rate,
                             silence_rate=cfg.silence_rate,
                             missing_teacher=cfg.missing_teacher,
                             unknown_pool=unknown_pool,
                             record_sink=sink)

    max_epochs = cfg.max_epochs if cfg.max_epochs is not None else _DEFAULT_EPOCHS[stage]
    report = TrainReport(stage=stage, seed=cfg.seed)
    best_path = run_dir / "best.ckpt"
    last_path = run_dir / "last.ckpt"
    t_start = time.perf_counter()

    for epoch in range(start_epoch, max_epochs):
        rng = derive_rng(cfg.seed, "epoch", epoch)
        order = rng.permutation(len(train_idx))
        opt.lr = sched.lr
        sums: dict[str, float] = {}
        n_steps = 0
        for lo in range(0, len(order), cfg.batch):
            idxs = [train_idx[i] for i in order[lo: lo + cfg.batch]]
            batch = builder.make_batch(idxs, mode, rng, with_labels=labeled)
            T.clear_grads(model.params.values())
            with T.Tape() as tape:
                loss, comps = compute_stage_loss(model, batch, cfg, stage, train=True)
            T.backward(loss, tape)
            if batch.teacher is None and mode in ("wvc", "joint"):
                # no coverage in this batch: the teacher head sat out the step
                for name in model.param_names({"wvc_head"}):
                    p = model.params[name]
                    if name in opt.velocity and p.grad is None:
                        p.grad = np.zeros_like(p.data)
            T.sgd_step(model.params, opt)
            n_steps += 1
            for k, v in comps.items():
                sums[k] = sums.get(k, 0.0) + v
            metrics.write({"type": "step", "stage": stage, "epoch": epoch,
                           "step": n_steps, "lr": opt.lr, **comps})
        avg = {k: v / n_steps for k, v in sums.items()}

        val_metric = _validation_metric(model, builder, manifest, val_idx, cfg,
                                        stage, mode, labeled)
        improved = sched.improved(val_metric)
        new_lr = sched.update(val_metric)
        if improved:
            save_training_checkpoint(best_path, model, opt, sched, epoch + 1)
        save_training_checkpoint(last_path, model, opt, sched, epoch + 1)
        row = {"type": "epoch", "stage": stage, "epoch": epoch,
               "train_loss": avg.get("loss", 0.0),
               **{f"train_{k}": v for k, v in avg.items() if k != "loss"},
               "val_metric": val_metric, "lr": opt.lr, "next_lr": new_lr,
               "improved": improved,
               "wall_s": time.perf_counter() - t_start}
        metrics.write(row)
        report.epochs.append(row)
        if new_lr < cfg.min_lr:
            break

    if not best_path.exists():  # no epoch ran or never improved
        save_training_checkpoint(best_path, model, opt, sched, start_epoch)
    report.best_val = sched.best
    report.best_checkpoint = str(best_path)
    report.last_checkpoint = str(last_path)
    if stage == "finetune" and manifest.split_indices("test"):
        best_model, _ = load_model(best_path)
        report.final_test_accuracy = evaluate(best_model, manifest, "test",
                                              batch_size=cfg.eval_batch)
        metrics.write({"type": "final", "stage": stage,
                       "test_accuracy": report.final_test_accuracy})
    report.save(run_dir / "report.json")
    metrics.close()
    if sink is not None:
        aug_log.close()
    try:
        from . import report as rpt
        rpt.write_csv(run_dir)
        if cfg.figures:
            rpt.render_figures(run_dir)
    except Exception as e:  # reporting must not kill a finished run
        log.warning("report generation failed: %s", e)
    return best_path, report


def _validation_metric(model, builder, manifest, val_idx, cfg, stage, mode,
                       labeled) -> float:
    if stage == "finetune":
        return evaluate(model, manifest, "val", batch_size=cfg.eval_batch)
    # held-out pretraining loss with a fixed augmentation stream per stage
    rng = derive_rng(cfg.seed, "val")
    total, n = 0.0, 0
    for lo in range(0, len(val_idx), cfg.batch):
        idxs = val_idx[lo: lo + cfg.batch]
        batch = builder.make_batch(idxs, mode, rng, with_labels=False)
        _, comps = compute_stage_loss(model, batch, cfg, stage, train=False)
        total += comps["loss"] * len(idxs)
        n += len(idxs)
    return total / max(n, 1)


# -- public stage entry points ------------------------------------------------------


def pretrain_wvc(cfg: TrainConfig) -> tuple[Path, TrainReport]:
    """Optimize encoder + wvc head against the teacher store."""
    return _run_stage(replace(cfg, stage="wvc"), "wvc")


def pretrain_lgcsiam(cfg: TrainConfig, init_checkpoint=None) -> tuple[Path, TrainReport]:
    """Joint contrastive pretraining, optionally warm-started from a
    teacher-matching checkpoint."""
    return _run_stage(replace(cfg, stage="lgcsiam"), "lgcsiam", init_checkpoint)


def finetune(cfg: TrainConfig, init_checkpoint=None) -> tuple[Path, TrainReport]:
    """Supervised fine-tuning on the labeled subset."""
    return _run_stage(replace(cfg, stage="finetune"), "finetune", init_checkpoint)


# -- evaluation and inference --------------------------------------------------------


def evaluate(model_or_ckpt, manifest: D.DatasetManifest, split: str,
             batch_size: int = 256) -> float:
    """Accuracy (percent) over a split: argmax prediction, no augmentation,
    BN in eval mode, silence entries at their fixed crops."""
    model = model_or_ckpt
    if not isinstance(model, TCANet):
        model, _ = load_model(model_or_ckpt)
    idxs = manifest.split_indices(split)
    if not idxs:
        raise ContractViolation(f"split {split!r} is empty")
    correct = 0
    for lo in range(0, len(idxs), batch_size):
        chunk = [manifest.entries[i] for i in idxs[lo: lo + batch_size]]
        specs = np.stack([
            fe.normalize_spectrogram(fe.log_mel(fe.AudioClip(D.entry_wave(e))))
            for e in chunk])
        probs = model.forward_probs(Tensor(specs), train=False).data
        pred = probs.argmax(axis=1)
        labels = np.array([e.class_index for e in chunk])
        correct += int((pred == labels).sum())
    return 100.0 * correct / len(idxs)


def infer(ckpt_path, wav_path) -> tuple[str, np.ndarray]:
    """Classify one WAV file: returns (class name, 12 probabilities)."""
    model, _ = load_model(ckpt_path)
    clip = fe.read_wav(wav_path)
    spec = fe.normalize_spectrogram(fe.log_mel(clip))
    probs = model.forward_probs(Tensor(spec[None]), train=False).data[0]
    return D.CLASS_NAMES[int(probs.argmax())], probs
