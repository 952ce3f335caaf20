"""Three-stage training: supervised pretrain, joint semi-supervised
adaptation, and pseudo-label finetuning.

The joint step optimizes L = L_seg + L_cons + lambda_adv * L_adv for the
segmenter and the domain-classification BCE for the discriminator, in
strict alternation: the discriminator's evaluation of the target
consensus is computed once and shared by both losses, discriminator
gradients for its own update are taken with ``torch.autograd.grad`` (no
accumulation into segmenter parameters), and any cross-pollution left in
``.grad`` buffers by the shared graph is overwritten before each
optimizer step. Each optimizer owns only its network's parameters, so
neither update can touch the other network.
"""

from __future__ import annotations

import copy
import math
from dataclasses import dataclass, field, fields
from pathlib import Path
from typing import Optional

import numpy as np
import torch

from .adversary import AsppDiscriminator, adversarial_loss, discriminator_loss, liver_region_map
from .augment import AugmentParams, augment_slice
from .backbone import (
    BackboneConfig,
    PhnnNet,
    prevalence_weights,
    save_checkpoint,
    staged_seg_loss,
    phnn_forward,
)
from .consistency import consensus, jsd_loss
from .errors import ConfigError, TrainingDivergedError
from .evaluation import dsc, predict_region
from .fusion import CoHeteroNet, enumerate_views, hetero_forward, save_cohetero_checkpoint
from .phases import PHASES
from .pseudolabel import HolesRecord
from .synthdata import class_frequencies
from .volume_io import Study

LABELED_PHASE = "V"


@dataclass
class TrainConfig:
    stage: str = "joint"  # pretrain | joint | finetune
    seed: int = 0
    batch_labeled: int = 8
    batch_unlabeled: int = 8
    combos_per_step: int = 4
    holes_per_step: int = 2
    lambda_adv: float = 1e-3
    lambda_h: float = 0.01
    detach_consensus: bool = False
    pretrain_lr: float = 3e-4
    pretrain_betas: tuple[float, float] = (0.9, 0.99)
    seg_lr: float = 1e-5
    seg_momentum: float = 0.9
    disc_lr: float = 3e-4
    disc_poly_power: float = 0.9
    plateau_patience: int = 10
    plateau_factor: float = 0.1
    pretrain_epochs: int = 12
    joint_epochs: int = 3
    finetune_epochs: int = 2
    steps_per_epoch: int = 0  # 0: one pass over the labeled slice pool
    augment: bool = True
    slice_batch: int = 18  # inference batch for validation / hole mining

    def __post_init__(self):
        self.pretrain_betas = tuple(float(b) for b in self.pretrain_betas)

    def validate(self) -> None:
        if self.stage not in ("pretrain", "joint", "finetune"):
            raise ConfigError(f"unknown stage {self.stage!r}")
        if self.lambda_adv < 0 or self.lambda_h < 0:
            raise ConfigError("loss weights must be >= 0")
        if self.plateau_patience < 1:
            raise ConfigError("plateau_patience must be >= 1")
        if min(self.batch_labeled, self.batch_unlabeled, self.combos_per_step) < 1:
            raise ConfigError("batch sizes and combos_per_step must be >= 1")
        for name in ("pretrain_lr", "seg_lr", "disc_lr", "plateau_factor"):
            if getattr(self, name) <= 0:
                raise ConfigError(f"{name} must be > 0")


def _spawn_rng(seed: int, stream: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence((seed, stream)))


def _torch_seed(seed: int, stream: int) -> None:
    torch.manual_seed(int(np.random.SeedSequence((seed, stream)).generate_state(1)[0]))


def _slice_pool(studies: list[Study]) -> list[tuple[int, int]]:
    return [(si, z) for si, s in enumerate(studies) for z in range(s.shape[0])]


def _labeled_batch(studies, pool, idxs, rng, augment_params: Optional[AugmentParams]):
    imgs, masks = [], []
    for i in idxs:
        si, z = pool[int(i)]
        img = studies[si].phases[LABELED_PHASE].voxels[z]
        m = studies[si].mask.labels[z]
        if augment_params is not None:
            img, m = augment_slice(img, m, augment_params, int(rng.integers(2**31)))
        imgs.append(img)
        masks.append(m)
    x = torch.from_numpy(np.stack(imgs).astype(np.float32))[:, None]
    y = torch.from_numpy(np.stack(masks).astype(np.int64))
    return x, y


def _loss_value(v) -> float:
    return float(v.detach()) if torch.is_tensor(v) else float(v)


def _check_finite(step: Optional[int], **losses) -> None:
    bad = {k: _loss_value(v) for k, v in losses.items() if not math.isfinite(_loss_value(v))}
    if bad:
        where = f" at step {step}" if step is not None else ""
        raise TrainingDivergedError(f"non-finite loss{where}: {bad}")


def validation_region_dsc(net, studies: list[Study], combo_for=None,
                          slice_batch: int = 18) -> float:
    """Mean liver-region DSC over studies; default combo is all available."""
    scores = []
    for s in studies:
        combo = combo_for(s) if combo_for is not None else s.available
        scores.append(dsc(predict_region(net, s, combo, slice_batch=slice_batch),
                          s.mask.region()))
    return float(np.mean(scores))


LOSS_COLUMNS = ("step", "l_seg", "l_cons", "l_adv", "l_d", "total")


def write_loss_csv(rows: list[dict], path) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    lines = [",".join(LOSS_COLUMNS)]
    for r in rows:
        lines.append("%d,%.6f,%.6f,%.6f,%.6f,%.6f" % tuple(r[c] for c in LOSS_COLUMNS))
    path.write_text("\n".join(lines) + "\n")


# --------------------------------------------------------------------------
# Stage 1: supervised pretraining on the labeled phase.
# --------------------------------------------------------------------------


def pretrain(cfg: TrainConfig, train_studies: list[Study], val_studies: list[Study],
             out_dir=None, backbone_config: Optional[BackboneConfig] = None):
    """Train the plain backbone on labeled slices; return the best-val net.

    Returns (net, history); history has per-epoch validation DSC and the
    per-step loss rows.
    """
    cfg.validate()
    _torch_seed(cfg.seed, 1)
    net = PhnnNet(backbone_config)
    weights = prevalence_weights(class_frequencies(train_studies))
    opt = torch.optim.Adam(net.parameters(), lr=cfg.pretrain_lr, betas=cfg.pretrain_betas)
    sched = torch.optim.lr_scheduler.ReduceLROnPlateau(
        opt, mode="max", factor=cfg.plateau_factor, patience=cfg.plateau_patience)
    rng = _spawn_rng(cfg.seed, 2)
    aug = AugmentParams() if cfg.augment else None
    pool = _slice_pool(train_studies)
    steps_per_epoch = cfg.steps_per_epoch or max(1, len(pool) // cfg.batch_labeled)
    best_dsc, best_state = -1.0, None
    rows, epochs_hist = [], []
    step = 0
    for epoch in range(cfg.pretrain_epochs):
        order = rng.permutation(len(pool))
        for k in range(steps_per_epoch):
            idxs = order[(k * cfg.batch_labeled) % len(pool):][:cfg.batch_labeled]
            if len(idxs) < cfg.batch_labeled:
                idxs = order[:cfg.batch_labeled]
            x, y = _labeled_batch(train_studies, pool, idxs, rng, aug)
            loss = staged_seg_loss(phnn_forward(net, x), y, weights)
            _check_finite(step, l_seg=loss)
            opt.zero_grad()
            loss.backward()
            opt.step()
            v = _loss_value(loss)
            rows.append({"step": step, "l_seg": v, "l_cons": 0.0, "l_adv": 0.0,
                         "l_d": 0.0, "total": v})
            step += 1
        val = validation_region_dsc(net, val_studies, lambda s: (LABELED_PHASE,),
                                    slice_batch=cfg.slice_batch)
        sched.step(val)
        epochs_hist.append({"epoch": epoch, "val_dsc": val, "lr": opt.param_groups[0]["lr"]})
        if val > best_dsc:
            best_dsc, best_state = val, copy.deepcopy(net.state_dict())
    if best_state is not None:
        net.load_state_dict(best_state)
    history = {"steps": rows, "epochs": epochs_hist, "best_val_dsc": best_dsc}
    if out_dir is not None:
        out_dir = Path(out_dir)
        save_checkpoint(out_dir / "pretrain.pt", net, step)
        write_loss_csv(rows, out_dir / "pretrain_losses.csv")
    return net, history


# --------------------------------------------------------------------------
# Stage 2 initialization: widen the pretrained net into the fusion net.
# --------------------------------------------------------------------------


def _copy_stage(dst: torch.nn.Module, src: torch.nn.Module, widen_first: bool = False) -> None:
    src_convs = [m for m in src.modules() if isinstance(m, torch.nn.Conv2d)]
    dst_convs = [m for m in dst.modules() if isinstance(m, torch.nn.Conv2d)]
    assert len(src_convs) == len(dst_convs)
    with torch.no_grad():
        for j, (sc, dc) in enumerate(zip(src_convs, dst_convs)):
            if widen_first and j == 0:
                c_in = sc.weight.shape[1]
                dc.weight.zero_()
                dc.weight[:, :c_in] = sc.weight
            else:
                dc.weight.copy_(sc.weight)
            dc.bias.copy_(sc.bias)


def init_cohetero_from_pretrained(pre: PhnnNet) -> CoHeteroNet:
    """Build the fusion network so every singleton view reproduces ``pre``.

    All four stems start as copies of the pretrained stages 1-2 (heads
    included); the trunk reuses stages 3-5, with the widened stage-3
    input's variance-half weights zeroed so fused single-phase features
    (variance exactly zero) see the pretrained computation unchanged.
    """
    net = CoHeteroNet(BackboneConfig(**{f.name: getattr(pre.config, f.name)
                                        for f in fields(BackboneConfig)}))
    for phase in PHASES:
        for i in range(2):
            _copy_stage(net.stems[phase][i], pre.stages[i])
            _copy_stage(net.stem_heads[phase][i], pre.heads[i])
    for j, i in enumerate(range(2, len(pre.stages))):
        _copy_stage(net.trunk[j], pre.stages[i], widen_first=(j == 0))
        _copy_stage(net.trunk_heads[j], pre.heads[i])
    return net


# --------------------------------------------------------------------------
# Stage 2/3: joint adaptation step and loop.
# --------------------------------------------------------------------------


@dataclass
class JointNets:
    seg: CoHeteroNet
    disc: AsppDiscriminator
    seg_opt: torch.optim.Optimizer
    disc_opt: torch.optim.Optimizer


def sample_combos(available, k: int, rng: np.random.Generator):
    """min(k, |views|) phase subsets drawn uniformly without replacement."""
    views = enumerate_views(available)
    take = min(k, len(views))
    idx = np.sort(rng.choice(len(views), size=take, replace=False))
    return [views[int(i)] for i in idx]


def joint_step(nets: JointNets, labeled_batch, unlabeled_item, class_weights,
               cfg: TrainConfig, rng: np.random.Generator,
               holes_batch=None) -> dict:
    """One alternating update of segmenter and discriminator.

    ``labeled_batch`` is (slices, masks) for the labeled phase;
    ``unlabeled_item`` is (slices_by_phase, available) for one unlabeled
    study; ``holes_batch`` (finetune only) is a list of
    (slices_by_phase, pseudo_labels, combos).
    """
    seg, disc = nets.seg, nets.disc
    x_l, y_l = labeled_batch
    slices_u, available = unlabeled_item
    combos = sample_combos(available, cfg.combos_per_step, rng)

    outs_v = hetero_forward(seg, {LABELED_PHASE: x_l}, (LABELED_PHASE,))
    l_seg = staged_seg_loss(outs_v, y_l, class_weights)
    if holes_batch:
        terms = []
        for h_slices, h_pseudo, h_combos in holes_batch:
            for combo in h_combos:
                terms.append(staged_seg_loss(hetero_forward(seg, h_slices, combo),
                                             h_pseudo, class_weights))
        l_seg = l_seg + cfg.lambda_h * torch.stack(terms).mean()

    preds = [hetero_forward(seg, slices_u, c).final for c in combos]
    if len(preds) >= 2:
        l_cons = jsd_loss(preds, detach_consensus=cfg.detach_consensus)
    else:
        l_cons = preds[0].new_zeros(())
    m = consensus(preds)
    target_scores = disc(liver_region_map(m), origin="target")
    l_adv = adversarial_loss(disc, target_scores=target_scores)
    source_region = liver_region_map(outs_v.final).detach()
    l_d = discriminator_loss(disc, source_region, target_scores=target_scores)
    total = l_seg + l_cons + cfg.lambda_adv * l_adv
    _check_finite(None, l_seg=l_seg, l_cons=l_cons, l_adv=l_adv, l_d=l_d)

    # All backward passes happen before any in-place parameter update.
    # total.backward also deposits lambda_adv-scaled gradients into the
    # discriminator's .grad buffers (the shared target forward), and l_d's
    # grads are taken without accumulation so they can overwrite them.
    nets.seg_opt.zero_grad()
    total.backward(retain_graph=True)
    d_params = [p for p in disc.parameters() if p.requires_grad]
    d_grads = torch.autograd.grad(l_d, d_params)
    nets.seg_opt.step()
    for p, g in zip(d_params, d_grads):
        p.grad = g
    nets.disc_opt.step()
    return {"l_seg": _loss_value(l_seg), "l_cons": _loss_value(l_cons),
            "l_adv": _loss_value(l_adv), "l_d": _loss_value(l_d),
            "total": _loss_value(total)}


def _unlabeled_item(study: Study, cfg: TrainConfig, rng: np.random.Generator):
    depth = study.shape[0]
    take = min(cfg.batch_unlabeled, depth)
    zs = np.sort(rng.choice(depth, size=take, replace=False))
    slices = {p: torch.from_numpy(study.phases[p].voxels[zs].astype(np.float32))[:, None]
              for p in study.available}
    return slices, study.available


def _holes_batch(holes: list[HolesRecord], by_id: dict, cfg: TrainConfig,
                 rng: np.random.Generator):
    take = min(cfg.holes_per_step, len(holes))
    ridx = np.sort(rng.choice(len(holes), size=take, replace=False))
    batch = []
    for i in ridx:
        rec = holes[int(i)]
        study = by_id[rec.study_id]
        zs = np.where((rec.pseudo_mask.labels == 2).any(axis=(1, 2)))[0]
        if len(zs) > cfg.batch_unlabeled:
            zs = np.sort(rng.choice(zs, size=cfg.batch_unlabeled, replace=False))
        slices = {p: torch.from_numpy(study.phases[p].voxels[zs].astype(np.float32))[:, None]
                  for p in study.available}
        pseudo = torch.from_numpy(rec.pseudo_mask.labels[zs].astype(np.int64))
        combos = sample_combos(study.available, cfg.combos_per_step, rng)
        batch.append((slices, pseudo, combos))
    return batch


def joint_train(cfg: TrainConfig, seg: CoHeteroNet, labeled_train: list[Study],
                unlabeled_train: list[Study], val_studies: list[Study], *,
                disc: Optional[AsppDiscriminator] = None,
                holes: Optional[list[HolesRecord]] = None,
                epochs: Optional[int] = None,
                out_dir=None, ckpt_name: str = "joint.pt"):
    """Adaptation loop shared by the joint and finetune stages.

    When ``holes`` is a non-empty list the pseudo-label term is added to
    L_seg; with no holes (None or empty) the trajectory is identical to
    plain joint training under the same seed, because hole sampling draws
    from a dedicated random stream that is never touched.
    """
    cfg.validate()
    if disc is None:
        _torch_seed(cfg.seed, 3)
        disc = AsppDiscriminator()
    seg_opt = torch.optim.SGD(seg.parameters(), lr=cfg.seg_lr, momentum=cfg.seg_momentum)
    disc_opt = torch.optim.Adam(disc.parameters(), lr=cfg.disc_lr)
    sched = torch.optim.lr_scheduler.ReduceLROnPlateau(
        seg_opt, mode="max", factor=cfg.plateau_factor, patience=cfg.plateau_patience)
    nets = JointNets(seg, disc, seg_opt, disc_opt)
    weights = prevalence_weights(class_frequencies(labeled_train))
    rng = _spawn_rng(cfg.seed, 4)
    rng_holes = _spawn_rng(cfg.seed, 5)
    aug = AugmentParams() if cfg.augment else None
    pool = _slice_pool(labeled_train)
    by_id = {s.id: s for s in unlabeled_train}
    n_epochs = cfg.joint_epochs if epochs is None else epochs
    steps_per_epoch = cfg.steps_per_epoch or max(1, len(pool) // cfg.batch_labeled)
    total_steps = max(1, n_epochs * steps_per_epoch)
    rows, epochs_hist = [], []
    # The incoming state is a best-state candidate, so a stage whose every
    # epoch validates worse than its starting point restores that start.
    best_dsc = validation_region_dsc(net=seg, studies=val_studies, slice_batch=cfg.slice_batch)
    best_state = (copy.deepcopy(seg.state_dict()), copy.deepcopy(disc.state_dict()))
    step = 0
    for epoch in range(n_epochs):
        order = rng.permutation(len(pool))
        for k in range(steps_per_epoch):
            for group in disc_opt.param_groups:
                group["lr"] = cfg.disc_lr * (1.0 - step / total_steps) ** cfg.disc_poly_power
            idxs = order[(k * cfg.batch_labeled) % len(pool):][:cfg.batch_labeled]
            if len(idxs) < cfg.batch_labeled:
                idxs = order[:cfg.batch_labeled]
            labeled_batch = _labeled_batch(labeled_train, pool, idxs, rng, aug)
            u_study = unlabeled_train[int(rng.integers(len(unlabeled_train)))]
            unlabeled_item = _unlabeled_item(u_study, cfg, rng)
            holes_batch = _holes_batch(holes, by_id, cfg, rng_holes) if holes else None
            try:
                losses = joint_step(nets, labeled_batch, unlabeled_item, weights,
                                    cfg, rng, holes_batch=holes_batch)
            except TrainingDivergedError as e:
                raise TrainingDivergedError(f"step {step}: {e}") from e
            losses["step"] = step
            rows.append(losses)
            step += 1
        val = validation_region_dsc(net=seg, studies=val_studies, slice_batch=cfg.slice_batch)
        sched.step(val)
        epochs_hist.append({"epoch": epoch, "val_dsc": val,
                            "seg_lr": seg_opt.param_groups[0]["lr"],
                            "disc_lr": disc_opt.param_groups[0]["lr"]})
        if val > best_dsc:
            best_dsc = val
            best_state = (copy.deepcopy(seg.state_dict()), copy.deepcopy(disc.state_dict()))
    if best_state is not None:
        seg.load_state_dict(best_state[0])
        disc.load_state_dict(best_state[1])
    history = {"steps": rows, "epochs": epochs_hist, "best_val_dsc": best_dsc}
    if out_dir is not None:
        out_dir = Path(out_dir)
        save_cohetero_checkpoint(out_dir / ckpt_name, seg, step,
                                 extra={"disc": disc.state_dict()})
        write_loss_csv(rows, out_dir / (Path(ckpt_name).stem + "_losses.csv"))
    return seg, disc, history


def load_joint_checkpoint(path) -> tuple[CoHeteroNet, AsppDiscriminator, int]:
    """Load a joint/finetune checkpoint including the discriminator."""
    from .backbone import _load_payload

    payload = _load_payload(path, "cohetero")
    seg = CoHeteroNet(BackboneConfig(**payload["config"]))
    seg.load_state_dict(payload["state"])
    disc = AsppDiscriminator()
    extra = payload.get("extra") or {}
    if "disc" in extra:
        disc.load_state_dict(extra["disc"])
    return seg, disc, payload["step"]


def finetune_with_holes(cfg: TrainConfig, seg: CoHeteroNet, disc: AsppDiscriminator,
                        labeled_train: list[Study], unlabeled_train: list[Study],
                        holes: list[HolesRecord], val_studies: list[Study],
                        out_dir=None):
    """Continue joint training with the holes term in the supervised loss."""
    return joint_train(cfg, seg, labeled_train, unlabeled_train, val_studies,
                       disc=disc, holes=holes, epochs=cfg.finetune_epochs,
                       out_dir=out_dir, ckpt_name="finetune.pt")
