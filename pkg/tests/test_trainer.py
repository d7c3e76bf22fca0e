import numpy as np
import pytest
import torch

from unitflow import benchkit, cfm, dsp, trainer, units as U, vfnet
from unitflow.errors import DivergenceError, IncompatibleCheckpoint, InvalidInput

torch.set_num_threads(1)

TINY = vfnet.ModelConfig(layers=2, heads=2, dim=32, unit_vocab=10,
                         unit_emb_dim=16, mel_dim=80, max_frames=96)


def small_cfg(**kw):
    base = dict(stage="pretrain", total_updates=20, warmup_steps=4,
                peak_lr=1e-3, batch_frames=256, seed=0,
                checkpoint_every=1000, log_every=1)
    base.update(kw)
    return trainer.TrainConfig(**base)


def make_samples(n, T_lo=12, T_hi=30, seed=0):
    rng = np.random.default_rng(seed)
    out = []
    for i in range(n):
        T = int(rng.integers(T_lo, T_hi + 1))
        x1 = rng.normal(0, 1, (T, 80)).astype(np.float32)
        ids = [int(rng.integers(8))]
        while len(ids) < min(4, T):
            ids.append(int((ids[-1] + 1 + rng.integers(7)) % 8))
        u = U.UnitSequence(np.array(ids, dtype=np.int64), collapsed=True)
        out.append(trainer.TrainSample(f"s{i}", x1, U.pad_to_frames(u, T, 8)))
    return out


def test_lr_schedule_shape():
    cfg = small_cfg(total_updates=100, warmup_steps=10, peak_lr=2e-3)
    assert trainer.lr_schedule(0, cfg) == 0.0
    assert trainer.lr_schedule(5, cfg) == pytest.approx(1e-3)
    assert trainer.lr_schedule(10, cfg) == pytest.approx(2e-3)
    assert trainer.lr_schedule(55, cfg) == pytest.approx(1e-3)
    assert trainer.lr_schedule(100, cfg) == 0.0
    assert trainer.lr_schedule(140, cfg) == 0.0


def test_train_config_validation():
    with pytest.raises(InvalidInput):
        small_cfg(warmup_steps=30, total_updates=20)
    with pytest.raises(InvalidInput):
        small_cfg(stage="warmup")
    with pytest.raises(InvalidInput):
        small_cfg(peak_lr=0.0)
    with pytest.raises(InvalidInput):
        small_cfg(ablation_mode="nonsense")


def test_adamw_zero_grad_is_pure_decay():
    net = vfnet.init_params(TINY, 0)
    with torch.no_grad():
        for p in net.parameters():
            p.add_(torch.randn_like(p) * 0.1)
    before = {n: p.detach().clone() for n, p in net.named_parameters()}
    moments = trainer.fresh_moments(net)
    net.zero_grad()
    for p in net.parameters():
        p.grad = torch.zeros_like(p)
    lr, wd, n_steps = 1e-2, 0.05, 3
    for t in range(1, n_steps + 1):
        trainer.adamw_update(net, moments, lr=lr, beta1=0.9, beta2=0.999,
                             eps=1e-8, weight_decay=wd, t=t)
    factor = (1.0 - lr * wd) ** n_steps
    for n, p in net.named_parameters():
        assert torch.allclose(p.detach(), before[n] * factor, atol=1e-7), n


def test_adamw_single_param_matches_reference():
    # One scalar parameter, hand-computed Adam with decoupled decay.
    net = torch.nn.Linear(1, 1, bias=False)
    with torch.no_grad():
        net.weight.fill_(2.0)
    net.weight.grad = torch.tensor([[0.5]])
    moments = {"weight": (torch.zeros_like(net.weight), torch.zeros_like(net.weight))}
    trainer.adamw_update(net, moments, lr=0.1, beta1=0.9, beta2=0.999,
                         eps=1e-8, weight_decay=0.01, t=1)
    g = 0.5
    m_hat = (0.1 * g) / (1 - 0.9)
    v_hat = (0.001 * g * g) / (1 - 0.999)
    want = 2.0 - 0.1 * (m_hat / (np.sqrt(v_hat) + 1e-8) + 0.01 * 2.0)
    assert float(net.weight.detach()) == pytest.approx(want, rel=1e-6)


def test_adamw_rejects_step_zero():
    net = vfnet.init_params(TINY, 0)
    moments = trainer.fresh_moments(net)
    with pytest.raises(InvalidInput):
        trainer.adamw_update(net, moments, lr=1e-3, beta1=0.9, beta2=0.999,
                             eps=1e-8, weight_decay=0.0, t=0)


def test_clip_gradients_scales_only_above_norm():
    net = torch.nn.Linear(2, 2, bias=False)
    net.weight.grad = torch.full((2, 2), 10.0)
    total = trainer.clip_gradients(net, max_norm=1.0)
    assert total == pytest.approx(20.0)
    assert float(net.weight.grad.norm()) == pytest.approx(1.0, rel=1e-5)

    net.weight.grad = torch.full((2, 2), 0.01)
    total = trainer.clip_gradients(net, max_norm=1.0)
    assert total == pytest.approx(0.02)
    assert float(net.weight.grad.abs().max()) == pytest.approx(0.01)


def test_pack_batches_laws():
    samples = make_samples(13, seed=3)
    batches = trainer.pack_batches(samples, batch_frames=100)
    flat = [i for b in batches for i in b]
    assert sorted(flat) == list(range(len(samples)))
    for b in batches:
        total = sum(samples[i].x1.shape[0] for i in b)
        assert total <= 100 or len(b) == 1


def test_train_step_loss_matches_manual_recompute():
    samples = make_samples(3, seed=5)
    cfg = small_cfg()
    state = trainer.init_state(TINY, cfg)
    rng_copy = np.random.default_rng()
    rng_copy.bit_generator.state = state.rng.bit_generator.state

    loss, lr = trainer.train_step(samples, state, cfg)

    # Zero-init head: prediction is zero, loss is the pooled mean of ‖u_t‖²
    # over masked frames, flows drawn in batch order from the same stream.
    num = 0.0
    den = 0
    for s in samples:
        fb = cfm.make_flow_batch(s.x1, s.units, cfg.mask, cfg.path, rng_copy)
        sel = fb.mask > 0
        num += float((fb.u_t[sel] ** 2).sum())
        den += int(sel.sum()) * 80
    assert loss == pytest.approx(num / den, rel=1e-5)
    assert lr == trainer.lr_schedule(1, cfg)
    assert state.step == 1
    assert state.loss_history[-1] == (1, loss)


def test_train_step_batched_matches_single(tmp_path):
    # Same rng stream, same samples: one batch of 2 vs two batches of 1
    # must produce identical flow draws, hence identical pooled loss.
    samples = make_samples(2, T_lo=10, T_hi=10, seed=6)
    cfg = small_cfg()
    sa = trainer.init_state(TINY, cfg)
    sb = trainer.init_state(TINY, cfg)
    loss_joint, _ = trainer.train_step(samples, sa, cfg)

    rng = sb.rng
    total_num, total_den = 0.0, 0
    for s in samples:
        fb = cfm.make_flow_batch(s.x1, s.units, cfg.mask, cfg.path, rng)
        sel = fb.mask > 0
        total_num += float((fb.u_t[sel] ** 2).sum())
        total_den += int(sel.sum()) * 80
    assert loss_joint == pytest.approx(total_num / total_den, rel=1e-5)


def test_train_step_divergence_guard():
    samples = make_samples(1, seed=7)
    cfg = small_cfg()
    state = trainer.init_state(TINY, cfg)
    with torch.no_grad():
        state.net.head.weight.fill_(float("nan"))
        state.net.head.bias.fill_(float("nan"))
    with pytest.raises(DivergenceError):
        trainer.train_step(samples, state, cfg)


def test_train_step_reduces_loss_over_steps():
    samples = make_samples(6, T_lo=14, T_hi=20, seed=8)
    cfg = small_cfg(total_updates=60, warmup_steps=5, peak_lr=2e-3)
    state = trainer.init_state(TINY, cfg)
    for _ in range(60):
        trainer.train_step(samples, state, cfg)
    losses = [x[1] for x in state.loss_history]
    assert float(np.mean(losses[-5:])) < float(np.mean(losses[:5]))


def _mini_manifest_paths(manifest):
    return manifest


def test_prepare_training_samples_modes(mini_corpus):
    manifest, codebook = mini_corpus
    pre = trainer.prepare_training_samples(manifest, "pretrain", codebook)
    assert len(pre) == len(manifest.split("train"))
    k = codebook.centroids.shape[0]
    for s in pre:
        assert s.units.target_len == s.x1.shape[0]
        assert s.cond_mel is None
        assert np.all(s.units.ids <= k)

    fin = trainer.prepare_training_samples(manifest, "finetune", codebook)
    for s in fin:
        assert s.units.target_len == s.x1.shape[0]

    mel_mode = trainer.prepare_training_samples(
        manifest, "finetune", codebook, ablation_mode="mel_input")
    for s in mel_mode:
        assert s.cond_mel is not None
        assert s.cond_mel.shape[1] == 80


def test_run_stage_writes_artifacts(tmp_path, mini_corpus):
    manifest, codebook = mini_corpus
    cfg = small_cfg(total_updates=6, warmup_steps=2, checkpoint_every=3,
                    batch_frames=512)
    out = trainer.run_stage(manifest, tmp_path / "run", TINY, cfg, codebook)
    assert out.exists()
    assert (tmp_path / "run" / "metrics.csv").exists()
    assert (tmp_path / "run" / "step-000003.ckpt").exists()
    lines = (tmp_path / "run" / "metrics.csv").read_text().strip().splitlines()
    assert lines[0] == "step,loss,lr,wall_s"
    assert len(lines) == 7
    ck = vfnet.load_checkpoint(out)
    assert ck.step == 6
    assert ck.extra["stage"] == "pretrain"


def test_run_stage_resume_bitwise(tmp_path, mini_corpus):
    # A run interrupted at its periodic checkpoint and resumed under the
    # same config must land on the uninterrupted run bit for bit.
    manifest, codebook = mini_corpus
    full_cfg = small_cfg(total_updates=8, warmup_steps=2, checkpoint_every=4,
                         batch_frames=512)
    a = trainer.run_stage(manifest, tmp_path / "a", TINY, full_cfg, codebook)

    resumed = trainer.run_stage(manifest, tmp_path / "b", TINY, full_cfg,
                                codebook,
                                resume=tmp_path / "a" / "step-000004.ckpt")
    ca, cb = vfnet.load_checkpoint(a), vfnet.load_checkpoint(resumed)
    assert ca.step == cb.step == 8
    for name in ca.tensors:
        assert np.array_equal(ca.tensors[name], cb.tensors[name]), name


def test_finetune_requires_init_checkpoint(tmp_path, mini_corpus):
    manifest, codebook = mini_corpus
    cfg = small_cfg(stage="finetune", total_updates=4, warmup_steps=1)
    with pytest.raises(IncompatibleCheckpoint):
        trainer.run_stage(manifest, tmp_path / "ft", TINY, cfg, codebook)


def test_finetune_from_pretrain_checkpoint(tmp_path, mini_corpus):
    manifest, codebook = mini_corpus
    pre = trainer.run_stage(manifest, tmp_path / "pre", TINY,
                            small_cfg(total_updates=4, warmup_steps=1,
                                      batch_frames=512),
                            codebook)
    out = trainer.run_stage(manifest, tmp_path / "ft", TINY,
                            small_cfg(stage="finetune", total_updates=3,
                                      warmup_steps=1, batch_frames=512),
                            codebook, init_checkpoint=pre)
    ck = vfnet.load_checkpoint(out)
    assert ck.extra["stage"] == "finetune"
    assert ck.step == 3


def test_epoch_perm_deterministic_and_complete():
    a = trainer._epoch_perm(5, 3, 17)
    b = trainer._epoch_perm(5, 3, 17)
    c = trainer._epoch_perm(5, 4, 17)
    assert np.array_equal(a, b)
    assert sorted(a.tolist()) == list(range(17))
    assert not np.array_equal(a, c)
