"""Four-flow joint training of the two translation GANs and the spatial transformer.

Per step, with A the visible batch and B the misaligned thermal batch:

1. ``B_fake = G_v2t(A)``
2. ``A_fake1 = G_t2v(B)``
3. ``theta = regressor(vit([A, A_fake1]))`` and ``B_reg = warp(B, theta)``
4. ``A_fake2 = G_t2v(B_reg)`` with the same weights as step 2

Each discriminator takes one LSGAN update on detached fakes, then the
generators, ViT and regressor take one joint update on

    adv * (LSGAN_v2t + LSGAN_t2v) + l1_v2t * |B_fake - B| + l1_t2v * |A_fake1 - A|
    + cyc * |A_fake2 - target| + theta_reg * mean ||theta - I||^2
"""
from __future__ import annotations

import csv
import dataclasses
import json
import logging
import math
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from . import autodiff as ad
from . import data as vdata
from . import metrics as vmetrics
from . import spatial
from .autodiff import Adam, Tensor
from .networks import IDENTITY_THETA, AffineRegressor, PatchDiscriminator, UNetGenerator, ViTEncoder

log = logging.getLogger(__name__)

LOSS_NAMES = ("adv_v2t", "l1_v2t", "adv_t2v", "l1_t2v", "cycle", "theta_reg", "disc_v2t", "disc_t2v", "total")


class TrainingAborted(RuntimeError):
    def __init__(self, step: int, loss_name: str, detail: str = ""):
        self.step, self.loss_name = step, loss_name
        super().__init__(f"non-finite {loss_name} at step {step}" + (f": {detail}" if detail else ""))


@dataclass
class TrainConfig:
    """Every training knob. Desk-scale defaults; the original runs used batch 64 for 10 epochs."""

    steps: int = 2000
    epochs: int = 10
    batch_size: int = 8
    lr_generator: float = 2e-4
    lr_discriminator: float = 2e-4
    lr_stn: float = 2e-4
    beta1: float = 0.5
    beta2: float = 0.999
    beta1_stn: float | None = None
    lambda_adv: float = 1.0
    lambda_l1: float = 100.0
    lambda_l1_v2t: float | None = None
    lambda_l1_t2v: float | None = None
    lambda_cyc: float = 10.0
    lambda_theta: float = 0.01
    cycle_target: str = "visible"
    t2v_l1_path: str = "direct"
    seed: int = 0
    image_size: int = 64
    checkpoint_every: int = 500
    unet_depth: int = 4
    unet_width: int = 32
    disc_layers: int = 3
    disc_width: int = 32
    vit_patch: int = 8
    vit_dim: int = 128
    vit_depth: int = 4
    vit_heads: int = 4
    vit_pool: str = "cls"
    regressor_widths: tuple = (128, 128, 64, 64, 32)
    augment_warp: float = 0.0
    augment_flip: bool = False
    augment_joint: float = 0.0
    stn_warmup: int = 0

    def __post_init__(self):
        self.regressor_widths = tuple(int(w) for w in self.regressor_widths)
        positive = ("epochs", "batch_size", "lr_generator", "lr_discriminator", "lr_stn", "beta1", "beta2",
                    "image_size", "checkpoint_every", "unet_depth", "unet_width", "disc_layers", "disc_width",
                    "vit_patch", "vit_dim", "vit_depth", "vit_heads")
        for name in positive:
            if not getattr(self, name) > 0:
                raise ValueError(f"TrainConfig.{name} must be positive, got {getattr(self, name)}")
        for name in ("steps", "stn_warmup", "lambda_adv", "lambda_l1", "lambda_cyc", "lambda_theta", "augment_warp",
                     "augment_joint"):
            if getattr(self, name) < 0:
                raise ValueError(f"TrainConfig.{name} must be non-negative, got {getattr(self, name)}")
        if self.beta1_stn is not None and not 0.0 <= self.beta1_stn < 1.0:
            raise ValueError(f"TrainConfig.beta1_stn must be in [0, 1), got {self.beta1_stn}")
        if self.cycle_target not in ("visible", "fake_visible"):
            raise ValueError(f"cycle_target must be 'visible' or 'fake_visible', got {self.cycle_target!r}")
        if self.t2v_l1_path not in ("direct", "registered"):
            raise ValueError(f"t2v_l1_path must be 'direct' or 'registered', got {self.t2v_l1_path!r}")
        if self.vit_pool not in ("cls", "mean"):
            raise ValueError(f"vit_pool must be 'cls' or 'mean', got {self.vit_pool!r}")
        if len(self.regressor_widths) != 5:
            raise ValueError(f"the regressor has exactly five Linear-ReLU blocks; got widths {self.regressor_widths}")

    @property
    def stn_beta1(self) -> float:
        return self.beta1 if self.beta1_stn is None else self.beta1_stn

    @property
    def l1_v2t(self) -> float:
        return self.lambda_l1 if self.lambda_l1_v2t is None else self.lambda_l1_v2t

    @property
    def l1_t2v(self) -> float:
        return self.lambda_l1 if self.lambda_l1_t2v is None else self.lambda_l1_t2v

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        d["regressor_widths"] = list(self.regressor_widths)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = sorted(set(d) - known)
        if unknown:
            raise ValueError(f"unknown TrainConfig keys: {unknown}")
        return cls(**d)


@dataclass
class FlowTensors:
    A: Tensor
    B: Tensor
    B_fake: Tensor
    A_fake1: Tensor
    theta: Tensor
    B_reg: Tensor
    A_fake2: Tensor


class VistaMorphModel:
    """The two conditional GANs plus the ViT/MLP spatial transformer."""

    def __init__(self, config: TrainConfig | None = None):
        cfg = config or TrainConfig()
        self.config = cfg
        rng = np.random.default_rng([cfg.seed, 1])
        size = cfg.image_size
        self.gen_v2t = UNetGenerator(1, 1, cfg.unet_depth, cfg.unet_width, size, rng=rng)
        self.disc_v2t = PatchDiscriminator(2, cfg.disc_width, cfg.disc_layers, rng=rng)
        self.gen_t2v = UNetGenerator(1, 1, cfg.unet_depth, cfg.unet_width, size, rng=rng)
        self.disc_t2v = PatchDiscriminator(2, cfg.disc_width, cfg.disc_layers, rng=rng)
        self.vit = ViTEncoder(2, size, cfg.vit_patch, cfg.vit_dim, cfg.vit_depth, cfg.vit_heads, rng=rng,
                              pool=cfg.vit_pool)
        self.regressor = AffineRegressor(cfg.vit_dim, cfg.regressor_widths, rng=rng)

    NETWORKS = ("gen_v2t", "disc_v2t", "gen_t2v", "disc_t2v", "vit", "regressor")

    def networks(self):
        return {name: getattr(self, name) for name in self.NETWORKS}

    def state_dict(self) -> dict[str, np.ndarray]:
        out = {}
        for name, net in self.networks().items():
            out.update(net.state_dict(prefix=f"{name}."))
        return out

    def load_state_dict(self, state) -> None:
        for name, net in self.networks().items():
            net.load_state_dict(state, prefix=f"{name}.")

    # flows --------------------------------------------------------------------------------
    def flow1_v2t(self, A) -> Tensor:
        return self.gen_v2t(A)

    def flow2_t2v(self, B) -> Tensor:
        return self.gen_t2v(B)

    def predict_theta(self, A, A_fake1) -> Tensor:
        A, A_fake1 = ad.as_tensor(A), ad.as_tensor(A_fake1)
        if A.shape != A_fake1.shape:
            raise ValueError(f"visible {A.shape} and fake visible {A_fake1.shape} differ")
        return self.regressor(self.vit(ad.concatenate([A, A_fake1], axis=1)))

    def flow3_register(self, A, A_fake1, B) -> tuple[Tensor, Tensor]:
        B = ad.as_tensor(B)
        if B.shape != ad.as_tensor(A).shape:
            raise ValueError(f"thermal {B.shape} and visible {ad.as_tensor(A).shape} differ")
        theta = self.predict_theta(A, A_fake1)
        # warp in [0, 1] pixel space so zero padding is the black thermal background
        return theta, spatial.warp((B + 1.0) * 0.5, theta) * 2.0 - 1.0

    def flow4_cycle(self, B_reg, target) -> tuple[Tensor, Tensor]:
        A_fake2 = self.gen_t2v(B_reg)
        return A_fake2, l1(A_fake2, target)

    def forward(self, A, B) -> FlowTensors:
        A, B = ad.as_tensor(A), ad.as_tensor(B)
        B_fake = self.flow1_v2t(A)
        A_fake1 = self.flow2_t2v(B)
        theta, B_reg = self.flow3_register(A, A_fake1, B)
        A_fake2 = self.gen_t2v(B_reg)
        return FlowTensors(A, B, B_fake, A_fake1, theta, B_reg, A_fake2)

    def register(self, A, B) -> tuple[np.ndarray, np.ndarray]:
        """Inference: theta (N x 6) and registered thermal for network-range batches."""
        with ad.no_grad():
            A, B = Tensor(A), Tensor(B)
            A_fake1 = self.flow2_t2v(B)
            theta, B_reg = self.flow3_register(A, A_fake1, B)
        return theta.data, B_reg.data


def l1(a, b) -> Tensor:
    return ad.absolute(ad.as_tensor(a) - ad.as_tensor(b)).mean()


def registered_l1(A_fake1: Tensor, theta: Tensor, A) -> Tensor:
    """L1 between ``warp(A_fake1, theta)`` and ``A`` over the pixels the warp keeps in frame."""
    warped = spatial.warp((A_fake1 + 1.0) * 0.5, theta) * 2.0 - 1.0
    with ad.no_grad():
        mask = spatial.warp(Tensor(np.ones(A_fake1.shape, dtype=A_fake1.data.dtype)), theta.detach()).data
    return (ad.absolute(warped - ad.as_tensor(A)) * Tensor(mask)).sum() / max(float(mask.sum()), 1.0)


def lsgan(logits: Tensor, real: bool) -> Tensor:
    return ((logits - (1.0 if real else 0.0)) ** 2).mean()


def theta_penalty(theta: Tensor) -> Tensor:
    identity = Tensor(np.broadcast_to(IDENTITY_THETA, theta.shape).copy())
    return ((theta - identity) ** 2).sum(axis=1).mean()


@dataclass
class TrainState:
    model: VistaMorphModel
    opt_gen: Adam
    opt_stn: Adam
    opt_disc_v2t: Adam
    opt_disc_t2v: Adam
    rng: np.random.Generator
    step: int = 0
    history: list[dict] = field(default_factory=list)

    OPTIMIZERS = ("opt_gen", "opt_stn", "opt_disc_v2t", "opt_disc_t2v")

    @classmethod
    def create(cls, config: TrainConfig) -> "TrainState":
        model = VistaMorphModel(config)
        betas = (config.beta1, config.beta2)
        gen = model.gen_v2t.parameters() + model.gen_t2v.parameters()
        stn = model.vit.parameters() + model.regressor.parameters()
        return cls(
            model=model,
            opt_gen=Adam(gen, config.lr_generator, betas),
            opt_stn=Adam(stn, config.lr_stn, (config.stn_beta1, config.beta2)),
            opt_disc_v2t=Adam(model.disc_v2t.parameters(), config.lr_discriminator, betas),
            opt_disc_t2v=Adam(model.disc_t2v.parameters(), config.lr_discriminator, betas),
            rng=np.random.default_rng([config.seed, 2]),
        )

    @property
    def config(self) -> TrainConfig:
        return self.model.config

    def checkpoint_tensors(self) -> dict[str, np.ndarray]:
        tensors = {f"model.{k}": v for k, v in self.model.state_dict().items()}
        for name in self.OPTIMIZERS:
            st = getattr(self, name).state
            for i, (m, v) in enumerate(zip(st.m, st.v)):
                tensors[f"{name}.m.{i:04d}"] = m
                tensors[f"{name}.v.{i:04d}"] = v
        return tensors

    def save(self, path) -> Path:
        meta = {
            "kind": "vtmorph",
            "config": self.config.to_dict(),
            "step": self.step,
            "optimizer_steps": {n: getattr(self, n).state.step for n in self.OPTIMIZERS},
            "rng_state": self.rng.bit_generator.state,
        }
        return ad.save_checkpoint(path, self.checkpoint_tensors(), meta)

    @classmethod
    def load(cls, path) -> "TrainState":
        tensors, meta = ad.load_checkpoint(path)
        if meta.get("kind") != "vtmorph":
            raise ad.CheckpointError(f"{path} does not hold a vtmorph model")
        config = TrainConfig.from_dict(meta["config"])
        state = cls.create(config)
        state.model.load_state_dict({k[len("model."):]: v for k, v in tensors.items() if k.startswith("model.")})
        for name in cls.OPTIMIZERS:
            opt = getattr(state, name)
            opt.state.step = int(meta.get("optimizer_steps", {}).get(name, 0))
            keys = sorted(k for k in tensors if k.startswith(f"{name}.m."))
            if keys:
                opt.state.m = [tensors[k].copy() for k in keys]
                opt.state.v = [tensors[k.replace(".m.", ".v.")].copy() for k in keys]
        state.step = int(meta.get("step", 0))
        if "rng_state" in meta:
            state.rng.bit_generator.state = meta["rng_state"]
        return state


def _set_trainable(module, flag: bool) -> None:
    for p in module.parameters():
        p.requires_grad = flag


def _random_thetas(magnitude: float, n: int, rng: np.random.Generator) -> np.ndarray:
    wr = vdata.WarpRange(magnitude, 40.0 * magnitude, (1 - 0.4 * magnitude, 1 + 0.4 * magnitude), 0.0)
    return np.stack([wr.sample(rng) for _ in range(n)])


def augment(A: np.ndarray, B: np.ndarray, config: TrainConfig, rng: np.random.Generator):
    """Label-free augmentation of network-range batches.

    ``augment_flip`` flips A and B together. ``augment_joint`` moves A and B
    by one shared random warp, so the visible face is no longer in a fixed
    canonical pose. ``augment_warp`` adds extra misalignment to B alone.
    Visible images pad with white, thermal images with the cold background.
    """
    if config.augment_flip:
        flip = rng.random(len(A)) < 0.5
        A = np.where(flip[:, None, None, None], A[..., ::-1], A)
        B = np.where(flip[:, None, None, None], B[..., ::-1], B)
    if config.augment_joint > 0:
        thetas = _random_thetas(config.augment_joint, len(A), rng)
        A = vdata.to_network(1.0 - spatial.warp_array(1.0 - vdata.from_network(A), thetas)).astype(A.dtype)
        B = vdata.to_network(spatial.warp_array(vdata.from_network(B), thetas)).astype(B.dtype)
    if config.augment_warp > 0:
        thetas = _random_thetas(config.augment_warp, len(B), rng)
        B = vdata.to_network(spatial.warp_array(vdata.from_network(B), thetas)).astype(B.dtype)
    return A, B


def train_step(state: TrainState, A: np.ndarray, B: np.ndarray) -> dict[str, float]:
    """One discriminator update per GAN, then one joint generator + STN update."""
    cfg, model = state.config, state.model
    step = state.step + 1
    report: dict[str, float] = {"step": step}
    current = "input"
    try:
        A_t, B_t = Tensor(A), Tensor(B)
        current = "forward"
        flows = model.forward(A_t, B_t)

        current = "disc_v2t"
        state.opt_disc_v2t.zero_grad()
        d1 = 0.5 * (lsgan(model.disc_v2t(A_t, B_t), True) + lsgan(model.disc_v2t(A_t, flows.B_fake.detach()), False))
        d1.backward()
        state.opt_disc_v2t.step()

        current = "disc_t2v"
        state.opt_disc_t2v.zero_grad()
        d2 = 0.5 * (lsgan(model.disc_t2v(B_t, A_t), True) + lsgan(model.disc_t2v(B_t, flows.A_fake1.detach()), False))
        d2.backward()
        state.opt_disc_t2v.step()

        current = "generator"
        _set_trainable(model.disc_v2t, False)
        _set_trainable(model.disc_t2v, False)
        try:
            adv1 = lsgan(model.disc_v2t(A_t, flows.B_fake), True)
            adv2 = lsgan(model.disc_t2v(B_t, flows.A_fake1), True)
            l1_1 = l1(flows.B_fake, B_t)
            if cfg.t2v_l1_path == "direct":
                l1_2 = l1(flows.A_fake1, A_t)
            else:
                l1_2 = registered_l1(flows.A_fake1, flows.theta, A_t)
            target = A_t if cfg.cycle_target == "visible" else flows.A_fake1.detach()
            cyc = l1(flows.A_fake2, target)
            treg = theta_penalty(flows.theta)
            total = (cfg.lambda_adv * (adv1 + adv2) + cfg.l1_v2t * l1_1 + cfg.l1_t2v * l1_2
                     + cfg.lambda_cyc * cyc + cfg.lambda_theta * treg)
            state.opt_gen.zero_grad()
            state.opt_stn.zero_grad()
            if total.requires_grad:
                total.backward()
            state.opt_gen.step()
            if step > cfg.stn_warmup:
                state.opt_stn.step()
        finally:
            _set_trainable(model.disc_v2t, True)
            _set_trainable(model.disc_t2v, True)
    except FloatingPointError as exc:
        raise TrainingAborted(step, current, str(exc)) from exc

    values = {"adv_v2t": adv1, "l1_v2t": l1_1, "adv_t2v": adv2, "l1_t2v": l1_2, "cycle": cyc,
              "theta_reg": treg, "disc_v2t": d1, "disc_t2v": d2, "total": total}
    for name, t in values.items():
        v = float(t.data)
        if not math.isfinite(v):
            raise TrainingAborted(step, name)
        report[name] = v
    state.step = step
    state.history.append(report)
    return report


def batch_indices(n: int, batch_size: int, seed: int, step: int) -> np.ndarray:
    """Indices for 1-based ``step``: each epoch is a permutation seeded by (seed, epoch); the short tail is kept.

    A pure function of the step number, so a resumed run sees exactly the batches it would have.
    """
    per_epoch = math.ceil(n / batch_size)
    epoch, k = divmod(step - 1, per_epoch)
    order = np.random.default_rng([seed, 3, epoch]).permutation(n)
    return order[k * batch_size : (k + 1) * batch_size]


def total_steps(config: TrainConfig, n_pairs: int) -> int:
    if config.steps > 0:
        return config.steps
    return config.epochs * math.ceil(n_pairs / config.batch_size)


def fit_arrays(visible: np.ndarray, thermal: np.ndarray, config: TrainConfig, state: TrainState | None = None,
               out_dir=None, log_every: int = 50, callback=None) -> TrainState:
    """Train on N x H x W arrays in [0, 1] (visible, thermal). Resumes if ``state`` is given."""
    visible = np.asarray(visible)
    thermal = np.asarray(thermal)
    if visible.shape != thermal.shape or visible.ndim != 3:
        raise ValueError(f"visible {visible.shape} and thermal {thermal.shape} must both be N x H x W")
    if visible.shape[1:] != (config.image_size, config.image_size):
        raise ValueError(f"images are {visible.shape[1:]}, config expects {config.image_size}x{config.image_size}")
    if len(visible) == 0:
        raise ValueError("no training pairs")
    state = state or TrainState.create(config)
    dt = ad.get_default_dtype()
    A_all = vdata.to_network(visible)[:, None].astype(dt)
    B_all = vdata.to_network(thermal)[:, None].astype(dt)
    end = total_steps(config, len(A_all))
    out_dir = Path(out_dir) if out_dir else None
    start = time.perf_counter()
    while state.step < end:
        idx = batch_indices(len(A_all), config.batch_size, config.seed, state.step + 1)
        A, B = augment(A_all[idx], B_all[idx], config, state.rng)
        report = train_step(state, A, B)
        if callback:
            callback(state, report)
        if log_every and state.step % log_every == 0:
            log.info("step %d/%d total=%.4f cycle=%.4f l1_t2v=%.4f theta_reg=%.5f (%.1fs)", state.step, end,
                     report["total"], report["cycle"], report["l1_t2v"], report["theta_reg"],
                     time.perf_counter() - start)
        if out_dir and state.step % config.checkpoint_every == 0:
            state.save(out_dir / f"checkpoint_{state.step:06d}.ckpt")
    if out_dir:
        state.save(out_dir / "checkpoint_final.ckpt")
        write_loss_log(out_dir / "losses.csv", state.history)
    return state


def write_loss_log(path, history: Sequence[dict]) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["step", *LOSS_NAMES])
        for row in history:
            w.writerow([row["step"], *(repr(row[k]) for k in LOSS_NAMES)])
    return path


ARCHITECTURE_KEYS = ("image_size", "unet_depth", "unet_width", "disc_layers", "disc_width", "vit_patch",
                     "vit_dim", "vit_depth", "vit_heads", "vit_pool", "regressor_widths")


def train(manifest: vdata.Manifest, config: TrainConfig, out_dir, resume_from=None, log_every: int = 50) -> Path:
    """Train on the manifest's train split; returns the final checkpoint path."""
    if manifest is None or len(manifest) == 0:
        raise vdata.ManifestError("manifest is empty")
    manifest.validate()
    train_set = manifest.subset("train")
    if len(train_set) == 0:
        raise vdata.ManifestError("manifest has no training pairs")
    vis, thr = vdata.load_arrays(train_set)
    state = None
    if resume_from:
        state = TrainState.load(resume_from)
        mismatched = [k for k in ARCHITECTURE_KEYS if getattr(state.config, k) != getattr(config, k)]
        if mismatched:
            raise ValueError(f"cannot resume: config differs from checkpoint in {mismatched}")
        state.model.config = config
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    (out_dir / "config.json").write_text(json.dumps(config.to_dict(), indent=2, sort_keys=True))
    fit_arrays(vis, thr, config, state, out_dir, log_every)
    return out_dir / "checkpoint_final.ckpt"


# batch registration ----------------------------------------------------------------------------


@dataclass
class RegistrationResult:
    pair_id: str
    theta: np.ndarray
    registered: np.ndarray
    before: dict[str, float]
    after: dict[str, float]
    output_path: Path | None = None
    error: str | None = None


RESULT_COLUMNS = ["pair_id", "a", "b", "tx", "c", "d", "ty",
                  *(f"{k}_before" for k in vmetrics.REGISTRATION_COLUMNS),
                  *(f"{k}_after" for k in vmetrics.REGISTRATION_COLUMNS)]


def load_model(checkpoint) -> VistaMorphModel:
    if isinstance(checkpoint, VistaMorphModel):
        return checkpoint
    if isinstance(checkpoint, TrainState):
        return checkpoint.model
    return TrainState.load(checkpoint).model


def register_batch(checkpoint, pairs: Sequence[vdata.ImagePair], out_dir=None, batch_size: int = 16,
                   continue_on_error: bool = False, metric_config: vmetrics.MetricConfig | None = None,
                   write_generated: bool = True) -> list[RegistrationResult]:
    """Register every pair with a trained model and score it before/after.

    With ``out_dir``, writes ``<id>_vis.png`` (copy), ``<id>_thr_reg.png``,
    optionally ``<id>_gen.png`` (V2T output) and ``results.csv``.
    """
    model = load_model(checkpoint)
    size = model.config.image_size
    out_dir = Path(out_dir) if out_dir else None
    results: list[RegistrationResult] = []
    loaded = []
    for p in pairs:
        try:
            vis, thr = p.load()
            if vis.shape != (size, size):
                raise ValueError(f"pair {p.pair_id}: image size {vis.shape} != model size {(size, size)}")
            loaded.append((p, vis, thr))
        except ValueError as exc:
            if not continue_on_error:
                raise
            log.error("%s", exc)
            results.append(RegistrationResult(p.pair_id, np.full(6, np.nan), np.empty(0), {}, {}, error=str(exc)))
    dt = ad.get_default_dtype()
    for i in range(0, len(loaded), batch_size):
        chunk = loaded[i : i + batch_size]
        A = vdata.to_network(np.stack([c[1] for c in chunk]))[:, None].astype(dt)
        B_img = np.stack([c[2] for c in chunk])[:, None].astype(dt)
        with ad.no_grad():
            A_fake1 = model.flow2_t2v(Tensor(vdata.to_network(B_img).astype(dt)))
            theta = model.predict_theta(Tensor(A), A_fake1).data
            # warp the [0, 1] thermal so out-of-frame samples read the black background
            B_reg = spatial.warp(Tensor(B_img), Tensor(theta)).data
            B_gen = vdata.from_network(model.flow1_v2t(Tensor(A)).data) if write_generated and out_dir else None
        for k, (p, vis, thr) in enumerate(chunk):
            reg = np.clip(B_reg[k, 0].astype(np.float64), 0.0, 1.0)
            res = RegistrationResult(
                p.pair_id, theta[k].astype(np.float64), reg,
                before=vmetrics.registration_scores(vis, thr, metric_config),
                after=vmetrics.registration_scores(vis, vdata.quantize(reg), metric_config),
            )
            if out_dir:
                res.output_path = vdata.write_image(out_dir / f"{p.pair_id}_thr_reg.png", reg)
                vdata.write_image(out_dir / f"{p.pair_id}_vis.png", vis)
                if B_gen is not None:
                    vdata.write_image(out_dir / f"{p.pair_id}_gen.png", B_gen[k, 0])
            results.append(res)
    order = {p.pair_id: i for i, p in enumerate(pairs)}
    results.sort(key=lambda r: order[r.pair_id])
    if out_dir:
        write_results(out_dir / "results.csv", results)
    return results


def write_results(path, results: Sequence[RegistrationResult]) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(RESULT_COLUMNS)
        for r in results:
            if r.error:
                continue
            w.writerow([r.pair_id, *(repr(float(v)) for v in r.theta),
                        *(repr(r.before[k]) for k in vmetrics.REGISTRATION_COLUMNS),
                        *(repr(r.after[k]) for k in vmetrics.REGISTRATION_COLUMNS)])
    return path


def read_results(path) -> dict[str, np.ndarray]:
    with open(path, newline="") as fh:
        return {row["pair_id"]: np.array([float(row[k]) for k in ("a", "b", "tx", "c", "d", "ty")])
                for row in csv.DictReader(fh)}
