"""Two-phase differentiable architecture search.

Phase 1 optimizes (w, alpha) under the masked-reconstruction objective; only
the final alpha survives. Phase 2 re-initializes w, warm-starts alpha, and
repeats the same alternating scheme under classification loss. Each iteration
pairs one alpha step (gradient of the validation-batch loss, w frozen) with
one w step (gradient of the training-batch loss, alpha frozen); no second-
order terms are used. Discretizing the final alpha yields the architecture.

Everything is driven by explicit numpy Generators whose states are saved in
checkpoints, so a restored run continues the exact trajectory of an
uninterrupted one.
"""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass

import numpy as np

from . import precision
from .car import Decoder, apply_masks, generate_masks
from .data import ImageDataset, SplitSpec, load_blobs, save_blobs, split_indices
from .errors import ConfigError
from .optim import Adam, LrSchedule, SgdMomentum, lr_at, zero_grads
from .supernet import ArchParams, MacroConfig, Supernet, config_hash, discretize
from .tensor import Tensor, backward, cross_entropy, l1_loss, reset_tape

CHECKPOINT_STATE_VERSION = 1


@dataclass
class SearchConfig:
    """Hyperparameters of one search phase.

    The defaults of :meth:`car_defaults` and :meth:`finetune_defaults` are the
    published regime: 20 reconstruction epochs then 50 fine-tuning epochs,
    SGD(momentum 0.9, weight decay 3e-4, cosine lr from 0.025) for w, and
    Adam(weight decay 1e-3) for alpha at lr 3e-4 / 1e-4 per phase, on an
    even two-way split.
    """

    phase: str = "car_search"  # "car_search" | "finetune"
    epochs: int = 20
    batch_size: int = 16
    seed: int = 0
    w_lr: float = 0.025
    w_momentum: float = 0.9
    w_weight_decay: float = 3e-4
    w_lr_schedule: str = "cosine"
    alpha_lr: float = 3e-4
    alpha_weight_decay: float = 1e-3
    split_ratio: float = 0.5
    loss_region: str = "all"        # "all" | "masked"
    mask_count: tuple = (2, 5)
    mask_size: tuple | None = None  # None -> [H/8, H/3]
    fill: object = "mean"           # "mean" | "zero" | float
    label_smoothing: float = 0.0
    alpha_init: str = "zeros"       # "zeros" | "uniform"
    tie_stages: bool = False
    warm_start_weights: bool = False
    clip_norm: float | None = None  # off

    @staticmethod
    def car_defaults(**overrides) -> "SearchConfig":
        return SearchConfig(phase="car_search", epochs=20, alpha_lr=3e-4, **overrides)

    @staticmethod
    def finetune_defaults(**overrides) -> "SearchConfig":
        return SearchConfig(phase="finetune", epochs=50, alpha_lr=1e-4, **overrides)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["mask_count"] = list(self.mask_count)
        d["mask_size"] = None if self.mask_size is None else list(self.mask_size)
        return d

    @staticmethod
    def from_dict(d: dict) -> "SearchConfig":
        d = dict(d)
        d["mask_count"] = tuple(d["mask_count"])
        if d.get("mask_size") is not None:
            d["mask_size"] = tuple(d["mask_size"])
        return SearchConfig(**d)


def _resolve_fill(fill, dataset: ImageDataset):
    if fill == "mean":
        return dataset.mean
    if fill == "zero":
        return 0.0
    return float(fill)


def _clip_gradients(params, max_norm: float) -> None:
    total = 0.0
    for p in params:
        if p.grad is not None:
            total += float((p.grad * p.grad).sum())
    norm = math.sqrt(total)
    if norm > max_norm:
        scale = max_norm / norm
        for p in params:
            if p.grad is not None:
                p.grad *= scale


class SearchRun:
    """All mutable state of one search phase; checkpointable mid-run."""

    def __init__(self, cfg: SearchConfig, dataset: ImageDataset, macro: MacroConfig,
                 alpha_init: np.ndarray | None = None, _restoring: bool = False):
        if cfg.phase not in ("car_search", "finetune"):
            raise ConfigError(f"unknown search phase {cfg.phase!r}")
        if cfg.phase == "finetune" and dataset.labels is None:
            raise ConfigError("fine-tuning requires a labelled dataset")
        self.cfg = cfg
        self.macro = macro
        self.dataset = dataset

        self.net = Supernet(macro, seed=cfg.seed)
        self.arch_params = ArchParams(macro, tie_stages=cfg.tie_stages)
        if alpha_init is not None:
            self.arch_params.load_matrix(alpha_init)
        elif cfg.alpha_init == "uniform":
            rng = np.random.default_rng(cfg.seed + 17)
            self.arch_params.alpha.values[...] = rng.uniform(
                -1e-3, 1e-3, self.arch_params.alpha.values.shape
            )

        if cfg.phase == "car_search":
            dec_rng = np.random.default_rng(cfg.seed + 1)
            self.decoder = Decoder(dec_rng, macro.final_channels, macro.num_downsamples())
        else:
            self.decoder = None

        self.w_params = self.net.parameters() + (
            self.decoder.parameters() if self.decoder else []
        )
        self.w_opt = SgdMomentum(
            self.w_params, cfg.w_lr, momentum=cfg.w_momentum, weight_decay=cfg.w_weight_decay
        )
        self.w_sched = LrSchedule(cfg.w_lr_schedule, cfg.w_lr, total_steps=max(cfg.epochs, 1))
        self.a_opt = Adam(
            [self.arch_params.alpha], cfg.alpha_lr, weight_decay=cfg.alpha_weight_decay
        )

        self.idx_w, self.idx_a = (None, None)
        if not _restoring:
            # raw index arrays are kept so checkpoints can restore the partition
            self.idx_w, self.idx_a = split_indices(len(dataset), SplitSpec(cfg.split_ratio, cfg.seed))
            if len(self.idx_w) == 0 or len(self.idx_a) == 0:
                raise ConfigError(
                    f"split of {len(dataset)} samples at ratio {cfg.split_ratio} "
                    "leaves an empty side"
                )
        self.fill = _resolve_fill(cfg.fill, dataset)
        self.data_rng = np.random.default_rng(cfg.seed + 2)
        self.mask_rng = np.random.default_rng(cfg.seed + 3)
        self.epoch = 0
        self.history: list[tuple] = []  # (phase, epoch, split, loss, acc)

    # -- forward/loss ------------------------------------------------------

    def _car_batch_loss(self, images, _labels):
        h, w = self.dataset.image_size
        masks = [
            generate_masks(self.mask_rng, (h, w), self.cfg.mask_count, self.cfg.mask_size)
            for _ in range(len(images))
        ]
        masked = np.stack([apply_masks(img, m, self.fill) for img, m in zip(images, masks)])
        feats = self.net.features(Tensor(masked), self.arch_params)
        recon = self.decoder(feats)
        target = Tensor(images)
        if self.cfg.loss_region == "masked":
            weight = np.stack([m.grid() for m in masks]).astype(precision.dtype())[..., None]
            return l1_loss(recon, target, weight=weight), float("nan")
        return l1_loss(recon, target), float("nan")

    def _cls_batch_loss(self, images, labels):
        x = Tensor((images - self.dataset.mean) / self.dataset.std)
        logits = self.net.logits(x, self.arch_params)
        loss = cross_entropy(logits, labels, smoothing=self.cfg.label_smoothing)
        acc = float((logits.values.argmax(axis=1) == labels).mean())
        return loss, acc

    def batch_loss(self, images, labels):
        if self.cfg.phase == "car_search":
            return self._car_batch_loss(images, labels)
        return self._cls_batch_loss(images, labels)

    # -- training ----------------------------------------------------------

    def alpha_matrix(self) -> np.ndarray:
        return self.arch_params.matrix()

    def run(self) -> tuple[np.ndarray, list[tuple]]:
        while self.epoch < self.cfg.epochs:
            bilevel_epoch(self, self.idx_w, self.idx_a, self.batch_loss)
        return self.alpha_matrix(), list(self.history)

    # -- persistence -------------------------------------------------------

    def save(self, path) -> None:
        meta = {
            "state_version": CHECKPOINT_STATE_VERSION,
            "cfg": self.cfg.to_dict(),
            "macro": self.macro.to_dict(),
            "epoch": self.epoch,
            "history": [list(r) for r in self.history],
            "data_rng": self.data_rng.bit_generator.state,
            "mask_rng": self.mask_rng.bit_generator.state,
            "precision": precision.precision_name(),
        }
        blobs = {"meta": json.dumps(meta).encode()}
        blobs["alpha"] = self.arch_params.alpha.values
        for name, p in self.net.named_parameters():
            blobs[f"net.{name}"] = p.values
        if self.decoder is not None:
            for name, p in self.decoder.named_parameters():
                blobs[f"dec.{name}"] = p.values
        for key, arr in self.w_opt.state_arrays().items():
            blobs[f"wopt.{key}"] = arr
        for key, arr in self.a_opt.state_arrays().items():
            blobs[f"aopt.{key}"] = arr
        blobs["idx_w"] = self.idx_w.astype(np.int64)
        blobs["idx_a"] = self.idx_a.astype(np.int64)
        save_blobs(path, blobs)

    @staticmethod
    def restore(path, dataset: ImageDataset) -> "SearchRun":
        blobs = load_blobs(path)
        meta = json.loads(blobs["meta"].decode())
        if meta.get("state_version") != CHECKPOINT_STATE_VERSION:
            raise ConfigError(
                f"checkpoint state version {meta.get('state_version')!r} is not supported"
            )
        cfg = SearchConfig.from_dict(meta["cfg"])
        macro = MacroConfig.from_dict(meta["macro"])
        run = SearchRun(cfg, dataset, macro, _restoring=True)
        run.arch_params.alpha.values[...] = blobs["alpha"]
        for name, p in run.net.named_parameters():
            p.values[...] = blobs[f"net.{name}"]
        if run.decoder is not None:
            for name, p in run.decoder.named_parameters():
                p.values[...] = blobs[f"dec.{name}"]
        run.w_opt.load_state_arrays(
            {k[len("wopt."):]: v for k, v in blobs.items() if k.startswith("wopt.")}
        )
        run.a_opt.load_state_arrays(
            {k[len("aopt."):]: v for k, v in blobs.items() if k.startswith("aopt.")}
        )
        run.idx_w = blobs["idx_w"]
        run.idx_a = blobs["idx_a"]
        run.data_rng.bit_generator.state = meta["data_rng"]
        run.mask_rng.bit_generator.state = meta["mask_rng"]
        run.epoch = int(meta["epoch"])
        run.history = [tuple(r) for r in meta["history"]]
        return run


def _batches(indices, order, batch_size, n_iters):
    """Yield n_iters batches of positions into ``indices``, cycling if short."""
    m = len(order)
    for it in range(n_iters):
        take = [order[(it * batch_size + j) % m] for j in range(batch_size)]
        yield indices[np.asarray(take)]


def bilevel_epoch(state: SearchRun, idx_train, idx_val, batch_loss) -> None:
    """One epoch of paired alternating updates.

    Per iteration: (a) one Adam step on alpha from the validation-batch loss,
    then (b) one SGD step on w from the training-batch loss. The alpha step
    never touches w and vice versa; each step's gradients are zeroed before
    its own backward pass.
    """
    if len(idx_train) == 0 or len(idx_val) == 0:
        raise ConfigError("bilevel_epoch: both splits must be non-empty")
    cfg = state.cfg
    images, labels = state.dataset.images, state.dataset.labels
    state.w_opt.lr = lr_at(state.w_sched, state.epoch)

    n_iters = math.ceil(len(idx_train) / cfg.batch_size)
    order_t = state.data_rng.permutation(len(idx_train))
    order_v = state.data_rng.permutation(len(idx_val))
    batches_t = _batches(idx_train, order_t, cfg.batch_size, n_iters)
    batches_v = _batches(idx_val, order_v, cfg.batch_size, n_iters)

    alpha = state.arch_params.alpha
    sums = {"train": [0.0, 0.0, 0], "val": [0.0, 0.0, 0]}
    for batch_t, batch_v in zip(batches_t, batches_v):
        # (a) architecture step on the validation batch, w frozen (first-order:
        # no gradient flows into w, so none of its backward work is done)
        reset_tape()
        zero_grads([alpha])
        for p in state.w_params:
            p.requires_grad = False
        try:
            loss_v, acc_v = batch_loss(images[batch_v], None if labels is None else labels[batch_v])
            backward(loss_v)
        finally:
            for p in state.w_params:
                p.requires_grad = True
        if cfg.clip_norm:
            _clip_gradients([alpha], cfg.clip_norm)
        state.a_opt.step()

        # (b) weight step on the training batch, alpha frozen
        reset_tape()
        zero_grads(state.w_params)
        alpha.requires_grad = False
        try:
            loss_t, acc_t = batch_loss(images[batch_t], None if labels is None else labels[batch_t])
            backward(loss_t)
        finally:
            alpha.requires_grad = True
        if cfg.clip_norm:
            _clip_gradients(state.w_params, cfg.clip_norm)
        state.w_opt.step()

        for key, (lv, av) in (("val", (loss_v, acc_v)), ("train", (loss_t, acc_t))):
            sums[key][0] += float(lv.values)
            if not math.isnan(av):
                sums[key][1] += av
            sums[key][2] += 1
    reset_tape()

    for split_name in ("train", "val"):
        s_loss, s_acc, cnt = sums[split_name]
        acc = s_acc / cnt if state.cfg.phase == "finetune" else float("nan")
        state.history.append((cfg.phase, state.epoch, split_name, s_loss / cnt, acc))
    state.epoch += 1


def run_car_search(cfg: SearchConfig, dataset: ImageDataset, macro: MacroConfig):
    """Phase 1: search under masked reconstruction; returns (alpha, history).

    alpha starts at exactly zero; the trained w is discarded on purpose, only
    the architecture parameters are carried forward.
    """
    if cfg.phase != "car_search":
        raise ConfigError(f"run_car_search requires phase 'car_search', got {cfg.phase!r}")
    run = SearchRun(cfg, dataset, macro)
    assert not run.arch_params.alpha.values.any()
    return run.run()


def run_finetune(cfg: SearchConfig, dataset: ImageDataset, macro: MacroConfig,
                 alpha_init: np.ndarray | None = None):
    """Phase 2: search under classification with warm-started alpha."""
    if cfg.phase != "finetune":
        raise ConfigError(f"run_finetune requires phase 'finetune', got {cfg.phase!r}")
    run = SearchRun(cfg, dataset, macro, alpha_init=alpha_init)
    return run.run()


def run_full_pipeline(
    car_cfg: SearchConfig | None,
    ft_cfg: SearchConfig,
    search_dataset: ImageDataset,
    target_dataset: ImageDataset,
    macro: MacroConfig,
):
    """Search, fine-tune, and discretize; returns (Architecture, history rows).

    Pass ``car_cfg=None`` to skip phase 1 (the no-reconstruction ablation arm:
    alpha starts per ``ft_cfg.alpha_init`` instead of warm-started).
    """
    history: list[tuple] = []
    alpha0 = None
    car_run = None
    if car_cfg is not None:
        car_run = SearchRun(car_cfg, search_dataset, macro)
        assert not car_run.arch_params.alpha.values.any()
        alpha0, car_hist = car_run.run()
        history += car_hist

    ft_run = SearchRun(ft_cfg, target_dataset, macro, alpha_init=alpha0)
    if ft_cfg.warm_start_weights and car_run is not None:
        car_params = dict(car_run.net.named_parameters())
        for name, p in ft_run.net.named_parameters():
            p.values[...] = car_params[name].values
    _, ft_hist = ft_run.run()
    history += ft_hist

    digest = config_hash(
        {
            "car": None if car_cfg is None else car_cfg.to_dict(),
            "finetune": ft_cfg.to_dict(),
            "macro": macro.to_dict(),
        }
    )
    arch = discretize(ft_run.arch_params, macro, seed=ft_cfg.seed, config_digest=digest)
    return arch, history
