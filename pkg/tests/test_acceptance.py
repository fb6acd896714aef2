"""Acceptance suite: one test per criterion, each printing a PASS/FAIL line.

Criteria 5 and 6 train real models and dominate the runtime (several
minutes on one CPU core).
"""
import io
import time

import numpy as np
import pytest

from helpers import attention_oracle, gradcheck, leaf, mha_oracle, ssim_oracle, weighted_sum
from vitgan import nn
from vitgan.checkpoint import read_container, write_container
from vitgan.data import SyntheticDataset, SyntheticTaskSpec, batcher
from vitgan.data.imageio import load_image, save_image
from vitgan.discriminator import (DiscriminatorConfig, build_discriminator, layer_channels,
                                  patch_grid_size)
from vitgan.experiments import OVERFIT_MAX_STEPS, OVERFIT_THRESHOLD, ablation, overfit
from vitgan.generator import GeneratorConfig, PatchEmbedding, build_generator, num_patches
from vitgan.metrics import GaussianStats, fid, inception_score, ssim
from vitgan.tensor import ConfigError, Tensor
from vitgan.training import (TrainConfig, fit, init_state, load_checkpoint, save_checkpoint,
                             state_tensors, train_step)


@pytest.fixture
def verdict(capsys):
    """Print one PASS/FAIL line for the criterion, then enforce it."""
    def report(number: int, title: str, ok: bool, detail: str = ""):
        with capsys.disabled():
            print(f"\n{'PASS' if ok else 'FAIL'} criterion {number}: {title}"
                  + (f" ({detail})" if detail else ""))
        assert ok, f"criterion {number} failed: {detail}"
    return report


def checked(fn):
    try:
        return fn(), None
    except AssertionError as e:
        return None, str(e)


# ---------------------------------------------------------------------- 1

def test_criterion_1_gradients(verdict):
    rng = np.random.default_rng(0)
    t0 = time.perf_counter()
    f64 = lambda m: m.astype(np.float64)
    cases = {}

    lin = f64(nn.Linear(5, 4, rng))
    x = leaf(rng.standard_normal((3, 5)))
    cases["linear"] = lambda: gradcheck(lambda: weighted_sum(lin(x)), lin.parameters() + [x])

    conv = f64(nn.Conv2d(2, 3, 3, rng, stride=2, padding=1))
    xc = leaf(rng.standard_normal((2, 2, 7, 7)))
    cases["conv2d"] = lambda: gradcheck(lambda: weighted_sum(conv(xc)), conv.parameters() + [xc])

    convt = f64(nn.ConvTranspose2d(3, 2, 4, rng, stride=2, padding=1))
    xt = leaf(rng.standard_normal((2, 3, 3, 3)))
    cases["conv_transpose2d"] = lambda: gradcheck(lambda: weighted_sum(convt(xt)),
                                                  convt.parameters() + [xt])

    bn = f64(nn.BatchNorm2d(3))
    xb = leaf(rng.standard_normal((2, 3, 4, 4)))
    cases["batch_norm"] = lambda: gradcheck(lambda: weighted_sum(bn(xb)), bn.parameters() + [xb])

    ln = f64(nn.LayerNorm(6))
    xl = leaf(rng.standard_normal((2, 3, 6)))
    cases["layer_norm"] = lambda: gradcheck(lambda: weighted_sum(ln(xl)), ln.parameters() + [xl])

    q, k, v = (leaf(rng.standard_normal((2, 3, 4))) for _ in range(3))
    cases["attention"] = lambda: gradcheck(lambda: weighted_sum(nn.attention(q, k, v)), [q, k, v])

    mha = f64(nn.MultiHeadAttention(nn.AttentionConfig(8, 2), rng))
    xm = leaf(rng.standard_normal((2, 3, 8)))
    cases["mha"] = lambda: gradcheck(lambda: weighted_sum(mha(xm)), mha.parameters() + [xm],
                                     max_coords=12)

    enc = f64(nn.TransformerEncoderLayer(nn.AttentionConfig(8, 2), rng))
    cases["encoder_layer"] = lambda: gradcheck(lambda: weighted_sum(enc(xm)),
                                               enc.parameters() + [xm], max_coords=12)

    emb = f64(nn.Embedding(5, 3, rng))
    idx = np.array([[0, 2, 2], [4, 1, 0]])
    cases["embedding"] = lambda: gradcheck(lambda: weighted_sum(emb(idx)), emb.parameters())

    pe = f64(PatchEmbedding(12, 4, 6, rng))
    xp = leaf(rng.standard_normal((2, 4, 12)))
    cases["patch+position embedding"] = lambda: gradcheck(lambda: weighted_sum(pe(xp)),
                                                           pe.parameters() + [xp])

    gen = f64(build_generator(GeneratorConfig(image_size=16, patch_size=4, embed_dim=8,
                                              num_layers=1, num_heads=2, residual_channels=8)))
    xg = Tensor(rng.uniform(-1, 1, (2, 3, 16, 16)))
    cases["generator"] = lambda: gradcheck(lambda: weighted_sum(gen(xg)), gen.parameters(),
                                           max_coords=4)

    disc = f64(build_discriminator(DiscriminatorConfig(base_channels=4, num_downsamples=2), 16))
    c, y = Tensor(rng.uniform(-1, 1, (2, 3, 16, 16))), leaf(rng.uniform(-1, 1, (2, 3, 16, 16)))
    cases["discriminator"] = lambda: gradcheck(lambda: weighted_sum(disc(c, y)),
                                               disc.parameters() + [y], max_coords=6)

    failures, worst = [], 0.0
    for name, run in cases.items():
        err, msg = checked(run)
        if msg:
            failures.append(f"{name}: {msg}")
        else:
            worst = max(worst, err)
    secs = time.perf_counter() - t0
    ok = not failures and secs < 120
    verdict(1, "autodiff matches central differences for every layer type and both networks",
            ok, f"{len(cases)} cases, worst abs err {worst:.2e}, {secs:.1f}s"
            + ("; " + "; ".join(failures) if failures else ""))


# ---------------------------------------------------------------------- 2

def test_criterion_2_architecture_arithmetic(verdict):
    problems = []
    if num_patches(256, 16) != 256:
        problems.append("256/16 patch count")
    for size, p in [(16, 4), (32, 8), (64, 8), (64, 16), (32, 4)]:
        cfg = GeneratorConfig(image_size=size, patch_size=p, embed_dim=8, num_layers=1,
                              num_heads=2, residual_channels=16)
        if cfg.num_patches != (size // p) ** 2:
            problems.append(f"patches {size}/{p}")
        out = build_generator(cfg)(Tensor(np.zeros((2, 3, size, size), np.float32)))
        if out.shape != (2, 3, size, size):
            problems.append(f"generator output {out.shape} for {size}")
    accepted = 0
    for n_down in range(1, 5):
        for size in (16, 24, 32, 48, 64, 96, 128):
            cfg = DiscriminatorConfig(base_channels=2, num_downsamples=n_down)
            try:
                n = patch_grid_size(cfg, size)
            except ConfigError:
                continue
            accepted += 1
            out = build_discriminator(cfg, size)(Tensor(np.zeros((2, 3, size, size), np.float32)),
                                                 Tensor(np.zeros((2, 3, size, size), np.float32)))
            if not (n == size // 2 ** n_down - 2 and out.shape == (2, 1, n, n)):
                problems.append(f"grid {size}/{n_down}: {n} vs {out.shape}")
    if layer_channels(DiscriminatorConfig()) != [64, 128, 256, 512]:
        problems.append("reference channel layout")
    verdict(2, "patch count, generator output size and PatchGAN grid arithmetic", not problems,
            f"{accepted} discriminator configs traced" + ("; " + "; ".join(problems) if problems else ""))


# ---------------------------------------------------------------------- 3

def test_criterion_3_attention_oracles(verdict):
    rng = np.random.default_rng(3)
    worst = 0.0
    q, k, v = (rng.standard_normal((2, 5, 4)) for _ in range(3))
    worst = max(worst, np.abs(nn.attention(Tensor(q), Tensor(k), Tensor(v)).data
                              - attention_oracle(q, k, v)).max())
    for heads in (1, 2, 4):
        mha = nn.MultiHeadAttention(nn.AttentionConfig(8, heads), rng).astype(np.float64)
        for layer in (mha.q_proj, mha.k_proj, mha.v_proj, mha.out_proj):
            layer.weight.data = rng.standard_normal(layer.weight.shape) * 0.5
            layer.bias.data = rng.standard_normal(layer.bias.shape) * 0.1
        x = rng.standard_normal((2, 6, 8))
        worst = max(worst, np.abs(mha(Tensor(x)).data - mha_oracle(x, mha)).max())
    verdict(3, "attention and MHA (H in 1, 2, 4) equal direct-summation oracles", worst <= 1e-6,
            f"max abs diff {worst:.2e}")


# ---------------------------------------------------------------------- 4

def test_criterion_4_loss_composition(verdict):
    gcfg = GeneratorConfig(image_size=16, patch_size=4, embed_dim=16, num_layers=1, num_heads=2,
                           residual_channels=16)
    tcfg = TrainConfig(batch_size=2, total_steps=5, seed=1)
    state = init_state(gcfg, DiscriminatorConfig(base_channels=8, num_downsamples=2), tcfg)
    gen_params = set(state.generator.parameters())
    disc_params = set(state.discriminator.parameters())
    leaks, d_live = [], []

    def hook(phase, grads):
        if phase == "d":
            leaks.extend(p for p in grads if p in gen_params and np.any(grads[p]))
            d_live.append(any(np.any(grads[p]) for p in disc_params if p in grads))
        else:
            leaks.extend(p for p in grads if p in disc_params)

    data = SyntheticDataset(SyntheticTaskSpec(image_size=16), 6)
    worst = 0.0
    batches = batcher(data, tcfg.batch_size, tcfg.seed)
    for _ in range(tcfg.total_steps):
        m = train_step(state, next(batches), tcfg, on_grads=hook)
        worst = max(worst, abs(m["g_total"] - (m["g_adv"] + 100.0 * m["g_l1"]))
                    / max(1.0, abs(m["g_total"])))
    ok = worst <= 1e-6 and not leaks and all(d_live) and tcfg.lambda_l1 == 100.0
    verdict(4, "g_total = g_adv + 100 g_l1 each step; zero generator gradient in the D step", ok,
            f"max rel diff {worst:.1e}, leaked tensors {len(leaks)}")


# ---------------------------------------------------------------------- 5

def test_criterion_5_overfit(verdict):
    results = [overfit(mode) for mode in ("cgan_l1", "l1_only")]
    total = sum(r.seconds for r in results)
    ok = all(r.reached and r.steps <= OVERFIT_MAX_STEPS for r in results) and total < 15 * 60
    verdict(5, f"toy 64/P8/N4/H4/d128 overfits 4 pairs to L1 < {OVERFIT_THRESHOLD}", ok,
            "; ".join(f"{r.mode}: L1 {r.final_l1:.4f} at step {r.steps}" for r in results)
            + f"; {total:.0f}s total")


# ---------------------------------------------------------------------- 6

def test_criterion_6_ablation_direction(verdict):
    r = ablation()
    cg, l1 = r.mean_energy("cgan_l1"), r.mean_energy("l1_only")
    per_seed = ", ".join(f"seed {s}: {a:.3f} vs {b:.3f}" for s, a, b in
                         zip(r.seeds, r.energy["cgan_l1"], r.energy["l1_only"]))
    verdict(6, "cgan_l1 held-out outputs are sharper than l1_only (mean |Laplacian|)", cg > l1,
            f"{r.steps} steps per mode, mean {cg:.4f} vs {l1:.4f}; {per_seed}; "
            f"targets {np.mean(r.target_energy):.3f}; {r.seconds:.0f}s")


# ---------------------------------------------------------------------- 7

def test_criterion_7_metrics(verdict):
    rng = np.random.default_rng(7)
    x, y = rng.uniform(-1, 1, (32, 32)), rng.uniform(-1, 1, (32, 32))
    ssim_err = abs(ssim(x, y) - ssim_oracle(x, y))
    ssim_self = abs(ssim(x, x) - 1.0)
    s = GaussianStats.from_features(rng.standard_normal((40, 5)))
    fid_self = abs(fid(s, s))
    a, b = rng.uniform(0, 4, 6), rng.uniform(0, 4, 6)
    closed = float(np.sum((np.sqrt(a) - np.sqrt(b)) ** 2))
    fid_diag = abs(fid(GaussianStats(np.zeros(6), np.diag(a)),
                       GaussianStats(np.zeros(6), np.diag(b))) - closed)
    probs = rng.dirichlet(np.ones(5) * 0.5, size=20)
    is_val = inception_score(probs)
    one_hot = inception_score(np.eye(7))
    ok = (ssim_err <= 1e-7 and ssim_self <= 1e-12 and fid_self <= 1e-6 and fid_diag <= 1e-6
          and 1.0 <= is_val <= 5.0 and one_hot == pytest.approx(7.0, rel=1e-12))
    verdict(7, "SSIM, FID and IS exactness checks", ok,
            f"ssim vs oracle {ssim_err:.1e}, fid(s,s) {fid_self:.1e}, diag fid {fid_diag:.1e}, "
            f"IS {is_val:.3f} in [1, 5], one-hot IS {one_hot:.12g}")


# ---------------------------------------------------------------------- 8

def test_criterion_8_determinism_and_persistence(verdict, tmp_path):
    gcfg = GeneratorConfig(image_size=16, patch_size=4, embed_dim=16, num_layers=1, num_heads=2,
                           residual_channels=16)
    dcfg = DiscriminatorConfig(base_channels=8, num_downsamples=2)
    tcfg = TrainConfig(batch_size=2, total_steps=6, seed=11)
    data = SyntheticDataset(SyntheticTaskSpec(image_size=16), 5)

    def trace(state, until=None):
        buf = io.StringIO()
        fit(state, data, tcfg, metrics_out=buf, until_step=until)
        return buf.getvalue()

    run_a = trace(init_state(gcfg, dcfg, tcfg))
    run_b = trace(init_state(gcfg, dcfg, tcfg))
    part = init_state(gcfg, dcfg, tcfg)
    first = trace(part, until=3)
    save_checkpoint(part, tmp_path / "mid.vitg")
    resumed = load_checkpoint(tmp_path / "mid.vitg", gcfg, dcfg, tcfg)
    rest = trace(resumed)

    tensors = state_tensors(resumed)
    write_container(tmp_path / "rt.vitg", tensors)
    back = read_container(tmp_path / "rt.vitg")
    ckpt_exact = list(back) == list(tensors) and all(
        back[k].dtype == tensors[k].dtype and back[k].tobytes() == tensors[k].tobytes()
        for k in tensors)

    img = np.random.default_rng(8).uniform(-1, 1, (3, 20, 20))
    save_image(img, tmp_path / "x.png")
    img_err = np.abs(load_image(tmp_path / "x.png") - img).max()

    checks = {"identical traces": run_a == run_b,
              "resume matches": first + rest == run_a,
              "checkpoint bit-exact": ckpt_exact,
              "image within 8-bit quantization": img_err <= 1.0 / 255 + 1e-7}
    verdict(8, "determinism, resume and format round trips", all(checks.values()),
            ", ".join(f"{k}: {'ok' if v else 'NO'}" for k, v in checks.items())
            + f", image max err {img_err:.2e}")
