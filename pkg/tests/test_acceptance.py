"""Acceptance suite: eight release-gating contracts, one test per criterion.

Each test prints a single machine-readable verdict line
(``ACCEPTANCE <n> PASS|FAIL <name>: <detail>``) to the real stdout before
asserting, so the verdicts survive output capture and can be scraped from
any log.

Every oracle here is implemented from scratch (set arithmetic, explicit
boundary flood fill, all-pairs surface distances, central finite
differences) instead of calling back into the code it vets.
"""

from __future__ import annotations

import itertools
import math
import time

import numpy as np
import pytest
import torch
import torch.nn.functional as F
from scipy import ndimage

from cohetseg.adversary import (
    AsppDiscriminator,
    adversarial_loss,
    discriminator_loss,
    liver_region_map,
)
from cohetseg.backbone import BackboneConfig, PhnnNet, phnn_forward, staged_seg_loss
from cohetseg.consistency import consensus, jsd_loss
from cohetseg.evaluation import assd, dsc
from cohetseg.fusion import CoHeteroNet, enumerate_views, fuse_features, hetero_forward
from cohetseg.phases import PHASES
from cohetseg.pipeline import run_benchmark
from cohetseg.pseudolabel import extract_holes
from cohetseg.trainer import (
    JointNets,
    TrainConfig,
    init_cohetero_from_pretrained,
    joint_step,
)


def _report(capsys, num: int, ok: bool, name: str, detail: str) -> None:
    verdict = "PASS" if ok else "FAIL"
    line = f"ACCEPTANCE {num} {verdict} {name}: {detail}"
    with capsys.disabled():
        print(line, flush=True)
    assert ok, f"criterion {num} ({name}): {detail}"


# ---------------------------------------------------------------------------
# 1. Consistency-loss property suite
# ---------------------------------------------------------------------------

def _random_prediction_set(rng: np.random.Generator, k: int, dtype=torch.float64):
    logits = torch.from_numpy(rng.normal(0.0, 1.5, size=(k, 1, 3, 5, 5))).to(dtype)
    return [torch.softmax(logits[i], dim=1) for i in range(k)]


def _plain_phase_final(net: CoHeteroNet, x: torch.Tensor, phase: str) -> torch.Tensor:
    """Ordinary single-network forward for one phase: its own stem stages
    and heads, then the shared trunk on (features || zeros). No fusion code."""
    size = x.shape[-2:]

    def up(a):
        if a.shape[-2:] != size:
            a = F.interpolate(a, size=size, mode="bilinear", align_corners=False)
        return a

    f = x
    acc = None
    for stage, head in zip(net.stems[phase], net.stem_heads[phase]):
        f = stage(f)
        a = up(head(f))
        acc = a if acc is None else acc + a
    f = torch.cat([f, torch.zeros_like(f)], dim=1)
    for stage, head in zip(net.trunk, net.trunk_heads):
        f = stage(f)
        acc = acc + up(head(f))
    return torch.softmax(acc, dim=1)


def test_criterion_1_consistency_loss_properties(capsys):
    t0 = time.time()
    rng = np.random.default_rng(101)

    worst_neg = math.inf
    for _ in range(1000):
        k = int(rng.integers(2, 6))
        worst_neg = min(worst_neg, float(jsd_loss(_random_prediction_set(rng, k))))

    worst_ident = 0.0
    for _ in range(100):
        p = _random_prediction_set(rng, 1)[0]
        k = int(rng.integers(2, 6))
        worst_ident = max(worst_ident, abs(float(jsd_loss([p] * k))))

    perm_exact = True
    for dtype in (torch.float64, torch.float32):
        for _ in range(50):
            k = int(rng.integers(2, 5))
            preds = _random_prediction_set(rng, k, dtype=dtype)
            base = float(jsd_loss(preds))
            for perm in itertools.permutations(range(k)):
                if float(jsd_loss([preds[i] for i in perm])) != base:
                    perm_exact = False

    # Singleton phase subsets carry no fusion: the loss over the four
    # one-phase views must equal classic co-training across four networks.
    torch.manual_seed(7)
    net = CoHeteroNet(BackboneConfig(channels=(4, 4, 4, 4, 4),
                                     downsample=(1, 2, 1, 2, 1), blocks_per_stage=1))
    xs = {p: torch.randn(2, 1, 8, 8) for p in PHASES}
    with torch.no_grad():
        hetero = [hetero_forward(net, xs, (p,)).final for p in PHASES]
        plain = [_plain_phase_final(net, xs[p], p) for p in PHASES]
    tensors_equal = all(torch.equal(h, q) for h, q in zip(hetero, plain))
    singleton_exact = tensors_equal and float(jsd_loss(hetero)) == float(jsd_loss(plain))

    elapsed = time.time() - t0
    ok = (worst_neg >= 0.0 and worst_ident <= 1e-9 and perm_exact
          and singleton_exact and elapsed < 60.0)
    _report(capsys, 1, ok, "consistency-loss properties",
            f"min JSD over 1000 sets {worst_neg:.3e} (>=0); "
            f"max |JSD| identical sets {worst_ident:.3e} (<=1e-9); "
            f"permutation invariance exact: {perm_exact}; "
            f"singleton == co-training exact: {singleton_exact}; {elapsed:.1f}s (<60s)")


# ---------------------------------------------------------------------------
# 2. Analytic gradients vs central finite differences
# ---------------------------------------------------------------------------

def _max_rel_grad_err(params, loss_fn, eps=1e-6) -> float:
    loss = loss_fn()
    grads = torch.autograd.grad(loss, params, allow_unused=True)
    worst = 0.0
    with torch.no_grad():
        for p, g in zip(params, grads):
            analytic = torch.zeros_like(p) if g is None else g
            flat_p, flat_g = p.view(-1), analytic.reshape(-1)
            for i in range(flat_p.numel()):
                orig = float(flat_p[i])
                flat_p[i] = orig + eps
                hi = float(loss_fn())
                flat_p[i] = orig - eps
                lo = float(loss_fn())
                flat_p[i] = orig
                fd = (hi - lo) / (2.0 * eps)
                a = float(flat_g[i])
                worst = max(worst, abs(fd - a) / max(abs(fd), abs(a), 1e-6))
    return worst


def test_criterion_2_gradient_checks(capsys):
    t0 = time.time()
    torch.manual_seed(202)
    tiny = BackboneConfig(channels=(2, 2, 2, 2, 2), downsample=(1, 2, 1, 2, 1),
                          blocks_per_stage=1)
    rng = np.random.default_rng(202)

    pre = PhnnNet(tiny).double()
    n_pre = sum(p.numel() for p in pre.parameters())
    x = torch.from_numpy(rng.normal(0, 1, size=(2, 1, 8, 8)))
    y = torch.from_numpy(rng.integers(0, 3, size=(2, 8, 8)))
    y[0, 0, :3] = 255  # a few ignored pixels
    w = torch.tensor([1.0, 2.0, 4.0], dtype=torch.float64)
    err_seg = _max_rel_grad_err(list(pre.parameters()),
                                lambda: staged_seg_loss(phnn_forward(pre, x), y, w))

    seg = CoHeteroNet(tiny).double()
    n_seg = sum(p.numel() for p in seg.parameters())
    xs = {p: torch.from_numpy(rng.normal(0, 1, size=(2, 1, 8, 8)))
          for p in PHASES}
    combos = [("NC", "A"), ("V", "D"), ("NC", "A", "V", "D")]
    err_cons = _max_rel_grad_err(
        list(seg.parameters()),
        lambda: jsd_loss([hetero_forward(seg, xs, c).final for c in combos]))

    disc = AsppDiscriminator(width=4).double()
    n_disc = sum(p.numel() for p in disc.parameters())
    src = torch.from_numpy(rng.uniform(0.05, 0.95, size=(2, 1, 8, 8)))
    tgt = torch.from_numpy(rng.uniform(0.05, 0.95, size=(2, 1, 8, 8)))
    err_d = _max_rel_grad_err(list(disc.parameters()),
                              lambda: discriminator_loss(disc, src, tgt))

    def loss_adv():
        preds = [hetero_forward(seg, xs, c).final for c in combos]
        return adversarial_loss(disc, liver_region_map(consensus(preds)))

    err_adv = _max_rel_grad_err(list(seg.parameters()), loss_adv)

    elapsed = time.time() - t0
    sizes_ok = max(n_pre, n_seg, n_disc) <= 5000
    errs = {"seg": err_seg, "cons": err_cons, "disc": err_d, "adv": err_adv}
    ok = sizes_ok and max(errs.values()) <= 1e-4 and elapsed < 120.0
    _report(capsys, 2, ok, "finite-difference gradients",
            f"max rel err seg {err_seg:.2e}, cons {err_cons:.2e}, disc {err_d:.2e}, "
            f"adv {err_adv:.2e} (<=1e-4); params {n_pre}/{n_seg}/{n_disc} (<=5000); "
            f"{elapsed:.1f}s (<120s)")


# ---------------------------------------------------------------------------
# 3. Fusion structure: zero variance, faithful singleton init, view counts
# ---------------------------------------------------------------------------

def test_criterion_3_fusion_structure(capsys):
    torch.manual_seed(11)
    feats = {"V": torch.randn(2, 6, 5, 5, dtype=torch.float64)}
    fused = fuse_features(feats)
    var_zero = bool((fused[:, 6:] == 0).all()) and torch.equal(fused[:, :6], feats["V"])

    counts = [len(enumerate_views(PHASES[:n])) for n in (1, 2, 3, 4)]
    counts_ok = counts == [1, 3, 7, 15]

    torch.manual_seed(12)
    pre = PhnnNet(BackboneConfig())
    net = init_cohetero_from_pretrained(pre)
    x = torch.randn(2, 1, 16, 16)
    with torch.no_grad():
        ref = phnn_forward(pre, x)
        worst = 0.0
        for p in PHASES:
            outs = hetero_forward(net, {p: x}, (p,))
            for a, b in zip(outs.probs, ref.probs):
                worst = max(worst, float((a - b).abs().max()))
    init_ok = worst <= 1e-6

    ok = var_zero and counts_ok and init_ok
    _report(capsys, 3, ok, "fusion structure",
            f"singleton variance half exactly zero: {var_zero}; "
            f"view counts {counts} == [1, 3, 7, 15]; "
            f"max |singleton - pretrained| {worst:.2e} (<=1e-6)")


# ---------------------------------------------------------------------------
# 4. Hole extraction vs boundary flood fill
# ---------------------------------------------------------------------------

_STRUCT6 = ndimage.generate_binary_structure(3, 1)


def _flood_fill_holes(region: np.ndarray, min_size: int) -> np.ndarray:
    """Reference holes: flood the complement from all six faces, then keep
    unreached components strictly larger than ``min_size`` voxels."""
    region = region.astype(bool)
    outside = ~region
    seed = np.zeros_like(outside)
    seed[0, :, :] = seed[-1, :, :] = True
    seed[:, 0, :] = seed[:, -1, :] = True
    seed[:, :, 0] = seed[:, :, -1] = True
    seed &= outside
    reached = seed
    while True:
        grown = ndimage.binary_dilation(reached, structure=_STRUCT6, mask=outside)
        if np.array_equal(grown, reached):
            break
        reached = grown
    enclosed = outside & ~reached
    labels, n = ndimage.label(enclosed, structure=_STRUCT6)
    keep = np.zeros_like(region)
    for comp in range(1, n + 1):
        mask = labels == comp
        if int(mask.sum()) > min_size:
            keep |= mask
    return keep


def _cavity_kept_voxels(extent: tuple[int, int, int]) -> int:
    vol = np.zeros((14, 14, 14), dtype=bool)
    vol[1:13, 1:13, 1:13] = True
    dz, dy, dx = extent
    vol[3:3 + dz, 3:3 + dy, 3:3 + dx] = False
    return int(extract_holes(vol).sum())


def test_criterion_4_hole_extraction(capsys):
    t0 = time.time()
    rng = np.random.default_rng(404)
    mismatches = 0
    for _ in range(500):
        density = float(rng.uniform(0.3, 0.85))
        vol = rng.random((16, 16, 16)) < density
        min_size = int(rng.choice([0, 3, 20, 100]))
        got = extract_holes(vol, min_size=min_size).astype(bool)
        if not np.array_equal(got, _flood_fill_holes(vol, min_size)):
            mismatches += 1

    kept_150 = _cavity_kept_voxels((6, 5, 5))   # 150 voxels: above threshold
    kept_100 = _cavity_kept_voxels((4, 5, 5))   # exactly 100: strict > drops it
    kept_50 = _cavity_kept_voxels((2, 5, 5))    # 50 voxels: below threshold

    elapsed = time.time() - t0
    ok = (mismatches == 0 and kept_150 == 150 and kept_100 == 0 and kept_50 == 0
          and elapsed < 60.0)
    _report(capsys, 4, ok, "hole extraction",
            f"{mismatches}/500 random volumes disagree with flood fill; "
            f"150-voxel cavity kept {kept_150} voxels, 100-voxel kept {kept_100}, "
            f"50-voxel kept {kept_50}; {elapsed:.1f}s (<60s)")


# ---------------------------------------------------------------------------
# 5. Metric implementations vs brute-force oracles
# ---------------------------------------------------------------------------

def _set_dsc(a: np.ndarray, b: np.ndarray) -> float:
    sa = {tuple(i) for i in np.argwhere(a)}
    sb = {tuple(i) for i in np.argwhere(b)}
    if not sa and not sb:
        return 1.0
    return 2.0 * len(sa & sb) / (len(sa) + len(sb))


def _brute_surface(mask: np.ndarray) -> np.ndarray:
    fg = mask.astype(bool)
    out = np.zeros_like(fg)
    nz, ny, nx = fg.shape
    for z, y, x in np.argwhere(fg):
        exposed = False
        for dz, dy, dx in ((1, 0, 0), (-1, 0, 0), (0, 1, 0),
                           (0, -1, 0), (0, 0, 1), (0, 0, -1)):
            zz, yy, xx = z + dz, y + dy, x + dx
            if not (0 <= zz < nz and 0 <= yy < ny and 0 <= xx < nx):
                exposed = True  # the volume edge counts as surface
            elif not fg[zz, yy, xx]:
                exposed = True
        out[z, y, x] = exposed
    return out


def _brute_assd(pred: np.ndarray, gt: np.ndarray, spacing) -> float:
    sp = np.asarray(spacing, dtype=float)
    ps = np.argwhere(_brute_surface(pred)).astype(float) * sp
    gs = np.argwhere(_brute_surface(gt)).astype(float) * sp
    if len(ps) == 0 or len(gs) == 0:
        return float("nan")
    d = np.sqrt(((ps[:, None, :] - gs[None, :, :]) ** 2).sum(axis=-1))
    return float((d.min(axis=1).sum() + d.min(axis=0).sum()) / (len(ps) + len(gs)))


def test_criterion_5_metric_oracles(capsys):
    t0 = time.time()
    rng = np.random.default_rng(505)

    dsc_exact = True
    for _ in range(200):
        shape = tuple(int(rng.integers(3, 17)) for _ in range(3))
        a = rng.random(shape) < rng.uniform(0.0, 0.6)
        b = rng.random(shape) < rng.uniform(0.0, 0.6)
        if dsc(a, b) != _set_dsc(a, b):
            dsc_exact = False
    empty = np.zeros((4, 4, 4), dtype=bool)
    ball = empty.copy()
    ball[1:3, 1:3, 1:3] = True
    dsc_exact &= dsc(empty, empty) == 1.0 and dsc(empty, ball) == 0.0

    worst_assd = 0.0
    checked = 0
    while checked < 25:
        shape = tuple(int(rng.integers(4, 13)) for _ in range(3))
        a = ndimage.binary_closing(rng.random(shape) < 0.45)
        b = ndimage.binary_closing(rng.random(shape) < 0.45)
        if not a.any() or not b.any():
            continue
        spacing = tuple(float(rng.uniform(0.5, 3.0)) for _ in range(3))
        worst_assd = max(worst_assd,
                         abs(assd(a, b, spacing) - _brute_assd(a, b, spacing)))
        checked += 1
    nan_ok = math.isnan(assd(empty, ball, (1.0, 1.0, 1.0)))

    elapsed = time.time() - t0
    ok = dsc_exact and worst_assd <= 1e-9 and nan_ok and elapsed < 120.0
    _report(capsys, 5, ok, "metric oracles",
            f"DSC exact on 200 random + edge cases: {dsc_exact}; "
            f"max |ASSD - all-pairs| {worst_assd:.2e} over 25 volumes (<=1e-9); "
            f"empty-mask ASSD is NaN: {nan_ok}; {elapsed:.1f}s (<120s)")


# ---------------------------------------------------------------------------
# 6. One discriminator pass per target batch per step
# ---------------------------------------------------------------------------

def test_criterion_6_single_discriminator_pass(capsys):
    torch.manual_seed(21)
    tiny = BackboneConfig(channels=(4, 4, 4, 4, 4), downsample=(1, 2, 1, 2, 1),
                          blocks_per_stage=1)
    x_l = torch.randn(2, 1, 8, 8)
    y_l = torch.randint(0, 3, (2, 8, 8))
    slices_u = {p: torch.randn(2, 1, 8, 8) for p in PHASES}
    w = torch.ones(3)

    per_k = {}
    for k in (1, 2, 4, 15):
        seg = CoHeteroNet(tiny)
        disc = AsppDiscriminator(width=4)
        nets = JointNets(seg=seg, disc=disc,
                         seg_opt=torch.optim.SGD(seg.parameters(), lr=1e-4, momentum=0.9),
                         disc_opt=torch.optim.Adam(disc.parameters(), lr=1e-4))
        cfg = TrainConfig(combos_per_step=k, batch_labeled=2, batch_unlabeled=2,
                          augment=False)
        cfg.validate()
        rng = np.random.default_rng(0)
        deltas = []
        for _ in range(3):
            before = disc.calls["target"]
            joint_step(nets, (x_l, y_l), (slices_u, tuple(PHASES)), w, cfg, rng)
            deltas.append(disc.calls["target"] - before)
        per_k[k] = (deltas, disc.calls["target"], disc.calls["source"])

    ok = all(deltas == [1, 1, 1] and total_t == 3 and total_s == 3
             for deltas, total_t, total_s in per_k.values())
    _report(capsys, 6, ok, "single discriminator pass",
            "target forwards per step by combos_per_step: "
            + "; ".join(f"k={k}: {v[0]}" for k, v in sorted(per_k.items()))
            + " (each must be [1, 1, 1])")


# ---------------------------------------------------------------------------
# 7 & 8. End-to-end benchmark and bitwise determinism
# ---------------------------------------------------------------------------

@pytest.fixture(scope="session")
def benchmark_runs(tmp_path_factory):
    root = tmp_path_factory.mktemp("acceptance_bench")
    t0 = time.time()
    first = run_benchmark(root / "run_a", seed=0)
    elapsed_first = time.time() - t0
    second = run_benchmark(root / "run_b", seed=0)
    return {"dir_a": root / "run_a", "dir_b": root / "run_b",
            "first": first, "second": second, "elapsed_first": elapsed_first}


def test_criterion_7_benchmark(benchmark_runs, capsys):
    s = benchmark_runs["first"]
    elapsed = benchmark_runs["elapsed_first"]
    a = s["baseline_nc_dsc"] < s["baseline_v_dsc"]
    b = s["adapted_all_dsc"] >= s["baseline_all_dsc"] + 0.03
    c = s["adapted_all_dsc"] >= s["adapted_nc_dsc"]
    d = (s["post_all_dsc"] >= s["adapted_all_dsc"] - 0.005
         and s["post_finetune_tace_dsc"] > s["pre_finetune_tace_dsc"])
    t_ok = elapsed <= 1800.0
    ok = a and b and c and d and t_ok
    _report(capsys, 7, ok, "end-to-end benchmark",
            f"(a) NC {s['baseline_nc_dsc']:.4f} < V {s['baseline_v_dsc']:.4f}: {a}; "
            f"(b) adapted all {s['adapted_all_dsc']:.4f} >= baseline all "
            f"{s['baseline_all_dsc']:.4f} + 0.03: {b}; "
            f"(c) all >= NC {s['adapted_nc_dsc']:.4f}: {c}; "
            f"(d) post {s['post_all_dsc']:.4f} within 0.005 and TACE "
            f"{s['pre_finetune_tace_dsc']:.4f} -> {s['post_finetune_tace_dsc']:.4f} up: {d}; "
            f"{elapsed:.0f}s (<=1800s)")


def test_criterion_8_determinism(benchmark_runs, capsys):
    dir_a, dir_b = benchmark_runs["dir_a"], benchmark_runs["dir_b"]
    rel_a = sorted(p.relative_to(dir_a) for p in dir_a.rglob("*.csv"))
    rel_b = sorted(p.relative_to(dir_b) for p in dir_b.rglob("*.csv"))
    same_set = rel_a == rel_b and len(rel_a) > 0
    if same_set:
        diffs = [str(r) for r in rel_a
                 if (dir_a / r).read_bytes() != (dir_b / r).read_bytes()]
    else:
        diffs = ["csv file sets differ"]
    ok = same_set and not diffs
    _report(capsys, 8, ok, "benchmark determinism",
            f"{len(rel_a)} csv files compared across two identical-seed runs; "
            f"mismatches: {diffs if diffs else 'none'}")
