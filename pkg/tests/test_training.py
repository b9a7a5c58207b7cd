import math
from dataclasses import replace

import numpy as np
import pytest
import torch

from conftest import randomize, tiny_config
from pixelfuse import training as T
from pixelfuse.autodiff import NonFiniteError
from pixelfuse.checkpoint import (CheckpointError, decode_checkpoint, encode_checkpoint, load_checkpoint,
                                  save_checkpoint)
from pixelfuse.data import MixtureConfig, SampleRecord, all_single_object_scenes, caption, rasterize
from pixelfuse.masking import MaskSchedule
from pixelfuse.model import Example, ModelConfig, Segment, build_model, collate
from pixelfuse.rng import SeededStream

SMALL = ModelConfig(d_model=32, n_layers=2, n_heads=2, ffn_mult=2)


def _short(**kw):
    base = dict(steps=6, batch_size=8, lr=1e-3, log_every=2, seed=5, mask=MaskSchedule(0.5, 1.0, 0.5))
    base.update(kw)
    return T.TrainConfig(**base)


# -- optimizer ---------------------------------------------------------------------

def test_zero_grads_leave_params():
    p = {"w": torch.tensor([1.0, -2.0], dtype=torch.float64)}
    T.optimizer_step(p, {"w": torch.zeros(2, dtype=torch.float64)}, T.AdamState(), lr=0.1)
    assert p["w"].tolist() == [1.0, -2.0]


def test_single_adam_step_on_square():
    p = {"p": torch.tensor([1.0], dtype=torch.float64)}
    g = {"p": 2 * p["p"].clone()}
    T.optimizer_step(p, g, T.AdamState(), lr=0.1)
    # m_hat = g and v_hat = g^2 at step 1, so the step is lr * g / (|g| + 1e-8)
    assert float(p["p"]) == pytest.approx(1.0 - 0.1 * 2 / (2 + 1e-8), abs=1e-15)
    assert abs(1.0 - float(p["p"]) - 0.1) <= 1e-8


def test_decoupled_weight_decay_shrinks_multiplicatively():
    p = {"w": torch.tensor([3.0, -1.5], dtype=torch.float64)}
    T.optimizer_step(p, {"w": torch.zeros(2, dtype=torch.float64)}, T.AdamState(), lr=0.1, weight_decay=0.01)
    assert torch.allclose(p["w"], torch.tensor([3.0, -1.5], dtype=torch.float64) * (1 - 0.1 * 0.01), rtol=1e-15)


def test_zero_betas_is_rms_normalised_descent():
    g = torch.tensor([0.3, -4.0, 1e-3], dtype=torch.float64)
    p = {"w": torch.zeros(3, dtype=torch.float64)}
    st = T.AdamState()
    for _ in range(3):
        before = p["w"].clone()
        T.optimizer_step(p, {"w": g}, st, lr=0.01, beta1=0.0, beta2=0.0)
        assert torch.allclose(before - p["w"], 0.01 * g / (g.abs() + 1e-8), rtol=1e-12)


def test_grad_clipping_uses_global_norm():
    g = {"a": torch.tensor([3.0], dtype=torch.float64), "b": torch.tensor([4.0], dtype=torch.float64)}
    p = {k: torch.zeros(1, dtype=torch.float64) for k in g}
    st = T.AdamState()
    T.optimizer_step(p, g, st, lr=0.1, grad_clip=1.0)
    assert st.m["a"].item() == pytest.approx(0.1 * 0.6) and st.m["b"].item() == pytest.approx(0.1 * 0.8)


def test_nonfinite_gradient_names_parameter():
    p = {"good": torch.zeros(2), "bad": torch.zeros(2)}
    g = {"good": torch.ones(2), "bad": torch.tensor([1.0, float("nan")])}
    with pytest.raises(NonFiniteError, match="bad"):
        T.optimizer_step(p, g, T.AdamState(), lr=0.1)


# -- loss ------------------------------------------------------------------------

def test_text_only_uniform_logits_total_is_log_vocab():
    model = build_model(tiny_config(), 0)
    with torch.no_grad():
        model.lm_head.weight.zero_()
    exs = [Example("text_only", [Segment("text_target", ids=ids)]) for ids in ([1, 5, 2], [1, 9, 8, 7, 2])]
    parts = T.joint_step_loss(model, collate(exs, model.config))
    assert float(parts.total.detach()) == pytest.approx(math.log(model.config.vocab_size), abs=1e-12)
    assert parts.flow is None and parts.n_ce == 2


def test_oracle_flow_head_gives_zero_flow_loss(monkeypatch):
    cfg = tiny_config()
    model = build_model(cfg, 0)
    s = SeededStream(0)
    scene = all_single_object_scenes()[17]
    recs = [SampleRecord("generation", scene, rasterize(scene), caption=caption(scene)) for _ in range(3)]
    batch = collate([T.record_to_example(r, cfg, s) for r in recs], cfg)
    monkeypatch.setattr(T, "flow_head", lambda m, h, b: b.x1)
    parts = T.joint_step_loss(model, batch)
    assert parts.flow == 0.0 and parts.n_flow == 3


def test_total_weights_each_task_by_batch_share():
    cfg = tiny_config()
    model = build_model(cfg, 0)
    s = SeededStream(3)
    scene = all_single_object_scenes()[5]
    recs = [SampleRecord("generation", scene, rasterize(scene), caption=caption(scene)) for _ in range(3)]
    recs.append(SampleRecord("understanding", scene, rasterize(scene), caption=caption(scene)))
    batch = collate([T.record_to_example(r, cfg, s) for r in recs], cfg)
    parts = T.joint_step_loss(model, batch, flow_weight=2.0)
    expected = (1 * parts.ce + 2.0 * 3 * parts.flow) / 4
    assert float(parts.total.detach()) == pytest.approx(expected, rel=1e-12)


def test_empty_batch_rejected():
    with pytest.raises(ValueError):
        collate([], tiny_config())


def test_generation_records_need_targets():
    cfg = tiny_config()
    model = build_model(cfg, 0)
    from pixelfuse.model import prompt_example
    ex = prompt_example("generation", cfg.grid, condition_ids=[1, 2], xt=np.zeros(cfg.grid.image_shape), t=0.5)
    with pytest.raises(ValueError, match="targets"):
        T.joint_step_loss(model, collate([ex], cfg))


def test_full_model_gradient_check_small():
    """Fast variant of the acceptance gradient check: a few tensors of the
    tiny model, same mixed masked batch."""
    cfg = tiny_config()
    model = randomize(build_model(cfg, 3))
    batch = T.gradcheck_batch(cfg, 0)
    assert bool(batch.masked.any())
    keep = ("mask_token", "flow_head.bias", "time_fc2.bias", "blocks.0.attn.qkv.bias", "lm_head.weight")
    from pixelfuse.autodiff import grad_check
    wrapper = T._LossModule(model, batch, 1.0)
    base = {n: p.detach() for n, p in model.named_parameters()}
    fn = lambda p: torch.func.functional_call(wrapper, {f"model.{k}": v for k, v in {**base, **p}.items()}, ())
    report = grad_check(fn, {k: base[k] for k in keep}, eps=1e-5, tolerance=1e-4)
    assert report.passed, report.format()
    assert report.errors["mask_token"] <= 1e-4


# -- stages ---------------------------------------------------------------------

def test_steps_zero_returns_init():
    init = T.run_stage(_short(steps=1), SMALL).checkpoint
    out = T.run_stage(_short(stage="sft", steps=0), init=init)
    assert out.checkpoint is init and out.metrics == []


def test_non_pretrain_needs_checkpoint():
    with pytest.raises(ValueError):
        T.run_stage(_short(stage="sft"), SMALL)


def test_config_mismatch_rejected():
    init = T.run_stage(_short(steps=1), SMALL).checkpoint
    with pytest.raises(ValueError):
        T.run_stage(_short(stage="sft"), replace(SMALL, d_model=64), init=init)


def test_determinism_and_outputs(tmp_path):
    a = T.run_stage(_short(ckpt_every=4), SMALL, out_dir=tmp_path / "a")
    b = T.run_stage(_short(ckpt_every=4), SMALL, out_dir=tmp_path / "b")
    assert [r.total for r in a.metrics] == [r.total for r in b.metrics]
    assert (tmp_path / "a" / "metrics.csv").read_bytes() == (tmp_path / "b" / "metrics.csv").read_bytes()
    assert (tmp_path / "a" / "final.pxfu").read_bytes() == (tmp_path / "b" / "final.pxfu").read_bytes()
    assert (tmp_path / "a" / "ckpt_0000004.pxfu").exists()
    assert [r.step for r in a.metrics] == [2, 4, 6]
    rows = T.read_metrics_csv(tmp_path / "a" / "metrics.csv")
    assert list(rows[0]) == list(T.METRIC_HEADER)
    for r in rows:
        assert r["ce_loss"] >= 0 and r["flow_mse_loss"] >= 0 and r["total"] >= 0
        assert sum(r[f"n_{t}"] for t in T.TASK_COLUMNS) == 2 * 8
    assert rows[-1]["masking_active_fraction"] > 0 and rows[0]["masking_active_fraction"] == 0
    c = T.run_stage(_short(seed=6), SMALL)
    assert c.metrics != a.metrics


def test_sft_and_recon_stages(tmp_path):
    pre = T.run_stage(_short(), SMALL).checkpoint
    sft = T.run_stage(_short(stage="sft", lr=2e-4), init=pre)
    assert sft.checkpoint.stage == "sft" and sft.checkpoint.step == 6
    assert sum(r.counts["editing"] for r in sft.metrics) > 0
    assert all(r.masking_active_fraction == 0 for r in sft.metrics)
    rec = T.recon_finetune(_short(), pre, out_dir=tmp_path)
    rows = T.read_metrics_csv(tmp_path / "metrics.csv")
    assert all(r["ce_loss"] is None and r["flow_mse_loss"] is not None for r in rows)
    assert all(r["n_reconstruction"] == 8 * 2 for r in rows)
    assert rec.checkpoint.stage == "recon_finetune"


def test_reconstruction_source_equals_target():
    from pixelfuse.data import sample_batch
    for r in sample_batch(MixtureConfig(), "recon_finetune", 16, SeededStream(0)):
        assert np.array_equal(r.source, r.image)


def test_pretrain_resume_continues_step_and_moments():
    cfg = _short(steps=4, mask_total_steps=8)
    half = T.run_stage(cfg, SMALL).checkpoint
    assert half.optimizer is not None and half.optimizer["step"] == 4
    rest = T.run_stage(replace(cfg, seed=7), init=half)
    assert rest.checkpoint.step == 8 and rest.checkpoint.optimizer["step"] == 8
    assert rest.metrics[0].step == 6


def test_resume_matches_uninterrupted_run():
    full = T.run_stage(_short(steps=8), SMALL)
    half = T.run_stage(_short(steps=4, mask_total_steps=8), SMALL).checkpoint
    rest = T.run_stage(_short(steps=4), init=half)
    assert all(np.array_equal(full.checkpoint.tensors[k], rest.checkpoint.tensors[k]) for k in full.checkpoint.tensors)
    assert [r.as_csv_row() for r in rest.metrics] == [r.as_csv_row() for r in full.metrics[2:]]


def test_mixtures_share_slot_draws():
    # a slot's task comes from one keyed uniform, so 7g3u's generation slots are a
    # subset of 8g2u's at every step; stratification pins the per-step counts
    runs = [T.run_stage(_short(steps=6, log_every=1, mixture=MixtureConfig.parse(tag)), SMALL)
            for tag in ("8g2u", "7g3u", "3g7u")]
    for rows in zip(*(r.metrics for r in runs)):
        gens = [r.counts["generation"] for r in rows]
        texts = {r.counts["text_only"] for r in rows}
        assert gens == sorted(gens, reverse=True) and len(texts) == 1
        b = sum(rows[0].counts.values())
        for r, share in zip(rows, (0.64, 0.56, 0.24)):
            assert abs(r.counts["generation"] - share * b) < 2


def test_lr_schedule():
    cfg = T.TrainConfig(steps=1000, lr=1e-3)
    assert T.lr_at(0, cfg) == pytest.approx(1e-3 / 20)
    assert T.lr_at(19, cfg) == pytest.approx(1e-3)
    assert T.lr_at(500, cfg) == 1e-3
    sft = replace(cfg, stage="sft")
    assert T.lr_at(500, sft) == sft.sft_lr == pytest.approx(cfg.lr / 5)
    assert T.lr_at(500, replace(cfg, stage="recon_finetune")) == cfg.lr
    # warmup follows the pretraining horizon, not the length of a resumed piece
    assert T.lr_at(0, replace(cfg, steps=10), horizon=1000) == pytest.approx(1e-3 / 20)


# -- checkpoints ----------------------------------------------------------------------

def _ckpt():
    model = randomize(build_model(SMALL, 0))
    return T.checkpoint_from_model(model, 12, "pretrain", 3)


def test_checkpoint_round_trip_bit_exact(tmp_path):
    ck = T.run_stage(_short(steps=2), SMALL).checkpoint
    save_checkpoint(tmp_path / "c.pxfu", ck)
    back = load_checkpoint(tmp_path / "c.pxfu", SMALL)
    assert back.model_config == ck.model_config and back.step == ck.step
    for k, v in ck.tensors.items():
        assert back.tensors[k].dtype == v.dtype and back.tensors[k].tobytes() == v.tobytes()
    for kind in ("m", "v"):
        for k, v in ck.optimizer[kind].items():
            assert back.optimizer[kind][k].tobytes() == v.tobytes()
    assert encode_checkpoint(back) == (tmp_path / "c.pxfu").read_bytes()
    m = T.model_from_checkpoint(back)
    assert all(torch.equal(p, torch.from_numpy(ck.tensors[n])) for n, p in m.named_parameters())


def test_f64_checkpoint_round_trip():
    model = randomize(build_model(tiny_config(), 0))
    ck = T.checkpoint_from_model(model, 0, "init", 0)
    back = decode_checkpoint(encode_checkpoint(ck))
    assert all(back.tensors[k].tobytes() == v.tobytes() for k, v in ck.tensors.items())


def test_corrupted_magic_and_version():
    data = bytearray(encode_checkpoint(_ckpt()))
    bad = bytes(b"XXXX" + data[4:])
    with pytest.raises(CheckpointError, match="magic"):
        decode_checkpoint(bad)
    data[4] = 9
    with pytest.raises(CheckpointError, match="version"):
        decode_checkpoint(bytes(data))


def test_truncated_and_trailing():
    data = encode_checkpoint(_ckpt())
    with pytest.raises(CheckpointError, match="truncated"):
        decode_checkpoint(data[:-5])
    with pytest.raises(CheckpointError, match="trailing"):
        decode_checkpoint(data + b"\0")


def test_larger_config_rejected(tmp_path):
    big = T.checkpoint_from_model(build_model(replace(SMALL, d_model=64), 0), 0, "init", 0)
    save_checkpoint(tmp_path / "big.pxfu", big)
    with pytest.raises(CheckpointError, match="does not match"):
        load_checkpoint(tmp_path / "big.pxfu", SMALL)


def test_schema_and_finiteness_checks():
    ck = _ckpt()
    ck.tensors["rogue"] = ck.tensors.pop("mask_token")
    with pytest.raises(CheckpointError, match="schema"):
        decode_checkpoint(encode_checkpoint(ck))
    ck = _ckpt()
    ck.tensors["mask_token"] = ck.tensors["mask_token"][:-1]
    with pytest.raises(CheckpointError, match="shape"):
        decode_checkpoint(encode_checkpoint(ck))
    ck = _ckpt()
    ck.tensors["mask_token"] = ck.tensors["mask_token"].copy()
    ck.tensors["mask_token"][0] = np.inf
    with pytest.raises(CheckpointError, match="non-finite"):
        decode_checkpoint(encode_checkpoint(ck))


def test_missing_file():
    with pytest.raises(CheckpointError, match="cannot read"):
        load_checkpoint("/nonexistent/x.pxfu")
