"""Acceptance suite: one test per criterion, each recording a PASS/FAIL line
that is printed in the terminal summary.

Training-based criteria run through the CLI in-process, so they exercise the
same path a user would. Budgets below are the calibrated values noted beside
each; thresholds are the criteria's own and are never loosened.
"""
import csv
import json
import time

import numpy as np
import pytest

from _acceptance import record
from _probes import check_policy, random_example
from conftest import randomize, tiny_config
from pixelfuse import cli
from pixelfuse.checkpoint import decode_checkpoint, encode_checkpoint, load_checkpoint
from pixelfuse.data import MixtureConfig, export_dataset, import_dataset, sample_batch, sample_task
from pixelfuse.experiments import spearman
from pixelfuse.flow import euler_step, interpolate, true_velocity, v_loss, x_to_velocity
from pixelfuse.model import build_model
from pixelfuse.pnm import decode_pnm, encode_pgm, encode_ppm
from pixelfuse.rng import SeededStream
from pixelfuse.training import (GRADCHECK_CONFIG, gradcheck_batch, gradcheck_model, model_grad_check,
                                read_metrics_csv)

# calibrated budgets (see the decisions ledger for the calibration runs)
MEM_STEPS = 1500          # 16-scene memorization
COMP_STEPS = 6000         # held-out accuracy 0.77 at 2500 steps, 1.0 at 5000 and 7500
SWEEP_STEPS = 3000        # per mixture; at 1500 the 8g2u and 7g3u tails were within noise
ABLATION_STEPS = 3000     # total budget, split at 50%; masked branch trails here (see README)
RECON_STEPS = 500         # reconstruction finetune from the memorization checkpoint


def cli_run(*argv):
    code = cli.main([str(a) for a in argv])
    assert code == 0, f"pixelfuse {argv[0]} exited {code}"


def timed(fn):
    start = time.perf_counter()
    out = fn()
    return out, time.perf_counter() - start


def _eval(ckpt, out, metrics, split, *overrides):
    cli_run("eval", "--out", out, "--ckpt", ckpt, "--metrics", metrics, "--split", split, *overrides)
    return json.loads((out / "eval.json").read_text())


# -- 1. flow algebra -----------------------------------------------------------------------

def test_criterion_01_flow_algebra():
    def suite():
        rng = np.random.default_rng(101)
        x1, x0 = rng.standard_normal((2, 16, 16, 3))
        endpoints = (np.array_equal(interpolate(x1, x0, 0.0), x0) and np.array_equal(interpolate(x1, x0, 1.0), x1)
                     and np.array_equal(true_velocity(x1, x0), x1 - x0))
        worst_identity = worst_step = 0.0
        for _ in range(1000):
            x1, x0 = rng.standard_normal((2, 8, 8, 3))
            x_pred = rng.standard_normal((8, 8, 3))
            t = float(rng.uniform(0.0, 0.99))
            xt = interpolate(x1, x0, t)
            lhs = float(v_loss(x_to_velocity(x_pred, xt, t), true_velocity(x1, x0)))
            rhs = float(np.mean((x_pred - x1) ** 2)) / (1 - t) ** 2
            worst_identity = max(worst_identity, abs(lhs - rhs) / abs(rhs))
            # oracle x-prediction, one Euler step to t=1
            x_end = euler_step(xt, x_to_velocity(x1, xt, t), t, 1.0)
            worst_step = max(worst_step, float(np.abs(x_end - x1).max()))
        return endpoints, worst_identity, worst_step

    (endpoints, ident, step), secs = timed(suite)
    ok = endpoints and ident <= 1e-10 and step <= 1e-12 and secs < 5
    record(1, ok, f"endpoints exact={endpoints}, identity rel err {ident:.1e} (<=1e-10), "
                  f"one-step recovery {step:.1e} (<=1e-12), {secs:.1f}s (<5s)")
    assert ok


# -- 2. gradient oracle --------------------------------------------------------------------

def test_criterion_02_gradient_oracle():
    model = gradcheck_model(GRADCHECK_CONFIG)
    batch = gradcheck_batch(GRADCHECK_CONFIG)
    n_params = sum(p.numel() for p in model.parameters())
    assert bool(batch.masked.any()) and batch.x1 is not None and batch.ce_target.numel() > 0
    report, secs = timed(lambda: model_grad_check(model, batch, tolerance=1e-4))
    ok = report.passed and n_params <= 10_000 and len(report.errors) == len(dict(model.named_parameters())) \
        and secs < 120
    record(2, ok, f"{n_params} params f64, {len(report.errors)} tensors, max rel err "
                  f"{report.max_rel_error:.1e} (<=1e-4), {secs:.0f}s (<120s)")
    assert ok, report.format()


# -- 3. attention policy -------------------------------------------------------------------

def test_criterion_03_attention_policy():
    config = tiny_config(max_seq_len=48)
    model = randomize(build_model(config, seed=11), seed=12).eval()
    stream = SeededStream(2024)
    failures = []
    for i in range(20):
        ex = random_example(config, stream)
        try:
            check_policy(model, ex, stream, probes=6)
        except AssertionError as e:
            failures.append(f"layout {i} ({ex.task}): {e}")
    record(3, not failures, f"{20 - len(failures)}/20 random layouts pass causal + bidirectional probes")
    assert not failures, failures


# -- 4. memorization ------------------------------------------------------------------------

# per-step rows, so the loss-trend check sees the 100-step moving average at step resolution
MEM = ["--set", "data.n_scenes=16", "--set", f"train.steps={MEM_STEPS}", "--set", "train.log_every=1"]


@pytest.fixture(scope="module")
def memorized(tmp_path_factory):
    root = tmp_path_factory.mktemp("memorize")
    _, secs = timed(lambda: cli_run("pretrain", "--out", root / "pre", *MEM))
    return root, secs


def test_criterion_04_memorization(memorized):
    root, train_secs = memorized
    report, eval_secs = timed(lambda: _eval(root / "pre" / "final.pxfu", root / "eval", "ce,generation",
                                            "train", *MEM))
    psnrs = np.array(report["psnr"])
    hits = int((psnrs >= 20).sum())
    secs = train_secs + eval_secs
    ok = report["n_scenes"] == 16 and report["caption_ce"] <= 0.1 and hits >= 14 and secs <= 15 * 60
    record(4, ok, f"caption CE {report['caption_ce']:.4f} (<=0.1), {hits}/16 prompts >=20 dB "
                  f"(min {psnrs.min():.1f} dB, need >=14), {MEM_STEPS} steps, {secs / 60:.1f} min (<=15)")
    assert ok


def test_memorization_loss_trend(memorized):
    # 100-step moving average of total loss is non-increasing after warmup, up to 2% blips
    root, _ = memorized
    rows = read_metrics_csv(root / "pre" / "metrics.csv")
    assert [r["step"] for r in rows] == list(range(1, MEM_STEPS + 1))
    total = np.array([r["total"] for r in rows])
    ma = np.convolve(total, np.ones(100) / 100, mode="valid")
    ma = ma[int(np.ceil(0.02 * MEM_STEPS)):]
    assert np.all(ma[1:] <= ma[:-1] * 1.02), np.max(ma[1:] / ma[:-1])


# -- 5. compositional generalization --------------------------------------------------------

def test_criterion_05_compositional_generalization(tmp_path):
    over = ["--set", "data.holdout=12", "--set", f"train.steps={COMP_STEPS}", "--set", "train.log_every=100"]
    _, train_secs = timed(lambda: cli_run("pretrain", "--out", tmp_path / "pre", *over))
    report, eval_secs = timed(lambda: _eval(tmp_path / "pre" / "final.pxfu", tmp_path / "eval", "generation",
                                            "eval", *over))
    acc = report["compositional_accuracy"]
    secs = train_secs + eval_secs
    ok = report["n_scenes"] == 48 and acc >= 0.8 and secs <= 45 * 60
    record(5, ok, f"held-out compositional accuracy {acc:.3f} on 48 prompts (>=0.8), {COMP_STEPS} steps, "
                  f"{secs / 60:.1f} min (<=45)")
    assert ok


# -- 6. ratio sweep -------------------------------------------------------------------------

def test_criterion_06_ratio_sweep(tmp_path):
    over = ["--set", f"train.steps={SWEEP_STEPS}", "--set", "train.log_every=10"]
    _, secs = timed(lambda: cli_run("ratio-sweep", "--out", tmp_path, "--ratios", "8g2u,7g3u,5g5u,3g7u", *over))
    rows = list(csv_rows(tmp_path / "sweep.csv"))
    gen, und = [float(r["gen_share"]) for r in rows], [float(r["und_share"]) for r in rows]
    mse, ce = [float(r["final_smoothed_mse"]) for r in rows], [float(r["final_smoothed_ce"]) for r in rows]
    rho_mse, rho_ce = spearman(gen, mse), spearman(und, ce)
    csvs = all((tmp_path / tag / "metrics.csv").exists() for tag in ("8g2u", "7g3u", "5g5u", "3g7u"))
    ok = abs(rho_mse) == 1 and abs(rho_ce) == 1 and rho_mse < 0 and rho_ce < 0 and csvs \
        and (tmp_path / "sweep.svg").exists() and secs <= 60 * 60
    record(6, ok, f"MSE vs gen share rho={rho_mse:+.2f}, CE vs und share rho={rho_ce:+.2f} (need -1 each), "
                  f"MSE {[round(m, 4) for m in mse]}, CE {[round(c, 4) for c in ce]}, {secs / 60:.1f} min (<=60)")
    assert ok


def csv_rows(path):
    with open(path, newline="") as fh:
        yield from csv.DictReader(fh)


# -- 7. masking ablation --------------------------------------------------------------------

def test_criterion_07_masking_ablation(tmp_path):
    over = ["--set", f"train.steps={ABLATION_STEPS}", "--set", "train.log_every=50"]
    cli_run("ablate-masking", "--out", tmp_path, *over)
    rows = {r["branch"]: r for r in csv_rows(tmp_path / "ablation.csv")}
    m, u = rows["masked"], rows["unmasked"]
    vqa_m, vqa_u = 100 * float(m["vqa_accuracy"]), 100 * float(u["vqa_accuracy"])
    gen_m, gen_u = 100 * float(m["compositional_accuracy"]), 100 * float(u["compositional_accuracy"])
    ok = vqa_m >= vqa_u - 1.0 and gen_m >= gen_u - 1.0 and (tmp_path / "ablation.txt").exists()
    record(7, ok, f"VQA masked {vqa_m:.1f} vs unmasked {vqa_u:.1f}, compositional masked {gen_m:.1f} vs "
                  f"unmasked {gen_u:.1f} (masked >= unmasked - 1 point on both)")
    assert ok


# -- 8. reconstruction finetune -------------------------------------------------------------

def test_criterion_08_reconstruction(memorized):
    root, _ = memorized
    over = [*MEM, "--set", f"train.steps={RECON_STEPS}"]

    def run():
        cli_run("recon-finetune", "--out", root / "recon", "--ckpt", root / "pre" / "final.pxfu", *over)
        return _eval(root / "recon" / "final.pxfu", root / "recon_eval", "recon", "train", *over)

    report, secs = timed(run)
    ok = report["recon_psnr"] >= 25 and report["recon_ssim"] >= 0.9 and secs <= 10 * 60
    record(8, ok, f"reconstruction PSNR {report['recon_psnr']:.2f} dB (>=25), SSIM {report['recon_ssim']:.4f} "
                  f"(>=0.9) on 16 training images, {RECON_STEPS} steps, {secs / 60:.1f} min (<=10)")
    assert ok


# -- 9. mixture statistics ------------------------------------------------------------------

def test_criterion_09_mixture_statistics():
    n = 10 ** 5
    worst, details = 0.0, []
    for i, tag in enumerate(("8g2u", "7g3u", "5g5u", "3g7u")):
        mix = MixtureConfig.parse(tag)
        stream = SeededStream(900 + i)
        draws = [sample_task(mix, "pretrain", stream)[0] for _ in range(n)]
        expected = {"generation": 0.8 * mix.gen_ratio / 10, "understanding": 0.8 * mix.und_ratio / 10,
                    "text_only": 0.2}
        for task, p in expected.items():
            worst = max(worst, abs(draws.count(task) / n - p))
        details.append(f"{tag} gen {draws.count('generation') / n:.3f}")
    # the captioning-heavy composition: 3g7u is gen 24%, understanding 56%, text 20%
    comp = MixtureConfig.parse("3g7u")
    composition_ok = (0.8 * comp.gen_ratio / 10, 0.8 * comp.und_ratio / 10, comp.text_only_fraction) \
        == pytest.approx((0.24, 0.56, 0.20))
    ok = worst <= 0.01 and composition_ok
    record(9, ok, f"max deviation {worst:.4f} over 1e5 draws per preset (<=0.01); {', '.join(details)}")
    assert ok


# -- 10. determinism and round trips ---------------------------------------------------------

def test_criterion_10_determinism_and_round_trips(tmp_path):
    short = ["--set", "model.d_model=32", "--set", "model.n_layers=2", "--set", "train.steps=30",
             "--set", "train.batch_size=8", "--set", "train.log_every=5", "--set", "data.n_scenes=8",
             "--set", "sample.num_euler_steps=5"]
    checks = {}
    for run in ("a", "b"):
        cli_run("pretrain", "--out", tmp_path / run, *short)
    checks["metrics"] = (tmp_path / "a" / "metrics.csv").read_bytes() == (tmp_path / "b" / "metrics.csv").read_bytes()
    checks["checkpoint files"] = (tmp_path / "a" / "final.pxfu").read_bytes() == \
        (tmp_path / "b" / "final.pxfu").read_bytes()

    raw = (tmp_path / "a" / "final.pxfu").read_bytes()
    ckpt = load_checkpoint(tmp_path / "a" / "final.pxfu")
    again = decode_checkpoint(encode_checkpoint(ckpt))
    checks["checkpoint save/load"] = encode_checkpoint(ckpt) == raw and all(
        np.array_equal(ckpt.tensors[k], again.tensors[k]) for k in ckpt.tensors)

    recs = sample_batch(MixtureConfig(), "sft", 24, SeededStream(5), hw=(16, 16))
    export_dataset(recs, tmp_path / "data")
    back = import_dataset(tmp_path / "data")
    same = len(back) == len(recs)
    for r, s in zip(recs, back):
        same &= (r.task, r.scene, r.target_scene, r.caption, r.question, r.answer, r.instruction, r.text) == \
            (s.task, s.scene, s.target_scene, s.caption, s.question, s.answer, s.instruction, s.text)
        for k, img in r.images().items():
            same &= np.array_equal(img, s.images()[k])
    checks["dataset export/import"] = bool(same)

    for run in ("a", "b"):
        cli_run("sample", "--out", tmp_path / f"s{run}", "--ckpt", tmp_path / "a" / "final.pxfu",
                "--prompt", "a large red circle in the top left on black", *short)
    ppm = (tmp_path / "sa" / "sample_000.ppm").read_bytes()
    checks["PPM output"] = ppm == (tmp_path / "sb" / "sample_000.ppm").read_bytes() and \
        encode_ppm(decode_pnm(ppm)) == ppm
    gray = np.random.default_rng(0).integers(0, 256, (16, 16), dtype=np.uint8)
    checks["PGM output"] = encode_pgm(decode_pnm(encode_pgm(gray))) == encode_pgm(gray)

    bad = [k for k, v in checks.items() if not v]
    record(10, not bad, "bit-identical: " + ", ".join(checks) if not bad else f"mismatch: {bad}")
    assert not bad
