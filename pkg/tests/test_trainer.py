import json
import struct

import numpy as np
import pytest
import torch

from unidwm import trainer as T
from unidwm.config import RunConfig
from unidwm.model import prepare
from unidwm.toyworld import build_sample

SMALL = {"model.width": 32, "model.layers": 1, "model.heads": 2, "train.batch_size": 2,
         "train.rays_per_frame": 32, "render.samples_train": 16, "train.lr": 1e-3,
         "train.steps_phase_a": 4, "train.steps_joint": 4}


def small_cfg(**extra):
    return RunConfig().override({**SMALL, **extra})


@pytest.fixture(scope="module")
def samples():
    return [build_sample(s, RunConfig().world) for s in (11, 12, 13)]


def data_for(cfg, samples):
    return [prepare(s, cfg) for s in samples]


def params_of(model, group):
    return {n: p.detach().clone() for n, p in model.named_parameters() if model.group_of(n) == group}


def test_total_loss():
    assert T.total_loss(torch.tensor(2.0), torch.tensor(0.3)).item() == pytest.approx(5.0, abs=1e-6)
    ln = torch.tensor(1.25)
    assert T.total_loss(ln, torch.tensor(0.0)).item() == 1.25
    a, b = torch.tensor(0.7, dtype=torch.float64), torch.tensor(0.013, dtype=torch.float64)
    assert T.total_loss(a, b).item() == 1.0 * 0.7 + 10.0 * 0.013


def test_total_loss_linearity_in_render_grads(samples):
    cfg = small_cfg()
    model = T.build_model(cfg)
    batch = T.collate(data_for(cfg, samples[:1]))
    p = model.field.fc3.weight

    def grad_of(weight_ntp, weight_depth):
        out = model(batch.splat, batch.ego, batch.prompts, batch.answers)
        ld = T.frame_depth_loss(model, out.frame_bevs, batch, [0, 1, 2, 3], cfg)
        (g,) = torch.autograd.grad(T.total_loss(out.ntp, ld, weight_ntp, weight_depth), p)
        return g

    torch.testing.assert_close(grad_of(1.0, 10.0), 10.0 * grad_of(0.0, 1.0), rtol=1e-5, atol=1e-8)


def test_adamw_scalar_hand_trace():
    p = torch.nn.Parameter(torch.tensor([1.0], dtype=torch.float64))
    opt = torch.optim.AdamW([p], lr=0.1, betas=(0.9, 0.999), eps=1e-8, weight_decay=0.0, foreach=False)
    g = 0.5
    p.grad = torch.tensor([g], dtype=torch.float64)
    T.optimizer_step(opt, 0.1)
    m_hat = (0.1 * g) / (1 - 0.9)
    v_hat = (0.001 * g * g) / (1 - 0.999)
    assert p.item() == pytest.approx(1.0 - 0.1 * m_hat / (np.sqrt(v_hat) + 1e-8), abs=1e-12)
    assert p.item() == pytest.approx(0.9, abs=1e-7)


def test_adamw_decoupled_decay():
    p = torch.nn.Parameter(torch.tensor([2.0], dtype=torch.float64))
    opt = torch.optim.AdamW([p], lr=0.1, weight_decay=0.01, foreach=False)
    p.grad = torch.zeros(1, dtype=torch.float64)
    T.optimizer_step(opt, 0.1)
    assert p.item() == pytest.approx(2.0 * (1 - 0.1 * 0.01), abs=1e-12)


def test_zero_grad_leaves_params(samples):
    cfg = small_cfg(**{"train.weight_decay": 0.0})
    model = T.build_model(cfg)
    opt = T.make_optimizer(model, cfg)
    before = {n: p.detach().clone() for n, p in model.named_parameters()}
    for p in model.parameters():
        p.grad = torch.zeros_like(p)
    T.optimizer_step(opt, 1e-3)
    for n, p in model.named_parameters():
        assert torch.equal(p, before[n]), n


def test_decay_groups():
    cfg = small_cfg()
    model = T.build_model(cfg)
    opt = T.make_optimizer(model, cfg)
    names = {id(p): n for n, p in model.named_parameters()}
    decayed = {names[id(p)] for p in opt.param_groups[0]["params"]}
    assert all(model.get_parameter(n).dim() >= 2 for n in decayed)
    assert not any(n.endswith("tok.weight") or "frame_embedding" in n for n in decayed)


def test_learning_rate_schedule():
    assert T.learning_rate(0, 100, 1e-3) == 1e-3
    assert T.learning_rate(50, 100, 1e-3) == pytest.approx(5e-4)
    assert T.learning_rate(100, 100, 1e-3) == pytest.approx(0.0, abs=1e-18)
    assert T.learning_rate(70, 100, 1e-3, cosine=False) == 1e-3


def test_batch_indices_cover_each_epoch():
    seen = [i for step in range(5) for i in T.batch_indices(10, 2, 3, step)]
    assert sorted(seen) == list(range(10))
    assert T.batch_indices(10, 2, 3, 4) == T.batch_indices(10, 2, 3, 4)
    with pytest.raises(ValueError):
        T.batch_indices(0, 2, 0, 0)


def test_phase_a_freezes_sequence_model(samples):
    cfg = small_cfg()
    model = T.build_model(cfg)
    frozen = {g: params_of(model, g) for g in ("sequence", "queries", "link")}
    tok = params_of(model, "tokenizer")
    state = T.train_phase_a(model, data_for(cfg, samples))
    assert state.step == 4 and len(state.metrics) == 4
    assert all(r[2] == 0.0 for r in state.metrics)
    for g, ref in frozen.items():
        now = params_of(model, g)
        assert all(torch.equal(now[n], ref[n]) for n in ref), g
    now = params_of(model, "tokenizer")
    assert any(not torch.equal(now[n], tok[n]) for n in tok)


def test_gradient_flow_audit(samples):
    cfg = small_cfg()
    model = T.build_model(cfg)
    data = data_for(cfg, samples)
    state = T.train_joint(model, data, steps=2)
    batch = T.collate(data[:2])
    state.optimizer.zero_grad(set_to_none=True)
    out = model(batch.splat, batch.ego, batch.prompts, batch.answers)
    ld = T.frame_depth_loss(model, out.frame_bevs, batch, [0, 1, 2, 3], cfg)
    T.total_loss(out.ntp, ld).backward()
    for group, params in model.parameter_groups().items():
        total = sum(float(p.grad.abs().sum()) for p in params if p.grad is not None)
        assert total > 0, group


def test_separated_mode_queries_get_no_gradient(samples):
    cfg = small_cfg(**{"model.separated_mode": True})
    model = T.build_model(cfg)
    data = data_for(cfg, samples)
    T.train_joint(model, data, steps=2)
    batch = T.collate(data[:2])
    model.zero_grad(set_to_none=False)
    out = model(batch.splat, batch.ego, batch.prompts, batch.answers)
    ld = T.frame_depth_loss(model, out.frame_bevs, batch, [0, 1, 2, 3], cfg)
    T.total_loss(out.ntp, ld).backward()
    for n, p in model.named_parameters():
        if model.group_of(n) == "queries":
            assert p.grad is None or not p.grad.any(), n
    assert any(p.grad is not None and p.grad.any() for p in model.separated.parameters())


def test_frame_subset_without_current_frame(samples):
    cfg = small_cfg(**{"train.supervised_frames": [1, 2, 3]})
    model = T.build_model(cfg)
    state = T.train_joint(model, data_for(cfg, samples), steps=2)
    assert all(np.isfinite(r[3]) for r in state.metrics)


def run_to_bytes(cfg, samples, steps):
    model = T.build_model(cfg)
    state = T.train_joint(model, data_for(cfg, samples), steps=steps, train_seeds=[11, 12, 13])
    return T.checkpoint_bytes(state)


def test_training_is_deterministic(samples):
    cfg = small_cfg()
    assert run_to_bytes(cfg, samples, 3) == run_to_bytes(cfg, samples, 3)


def test_checkpoint_round_trip(samples, tmp_path):
    cfg = small_cfg()
    model = T.build_model(cfg)
    state = T.train_joint(model, data_for(cfg, samples), steps=2, train_seeds=[11])
    path = tmp_path / "a.bin"
    T.save_checkpoint(state, path)
    ckpt = T.load_checkpoint(path)
    restored = T.restore_state(ckpt)
    assert T.checkpoint_bytes(restored) == path.read_bytes()
    for n, p in restored.model.named_parameters():
        assert torch.equal(p, model.get_parameter(n))
    assert ckpt.manifest["train_seeds"] == [11] and ckpt.manifest["step"] == 2


def test_resume_matches_uninterrupted_run(samples):
    cfg = small_cfg()
    data = data_for(cfg, samples)
    full = T.checkpoint_bytes(T.train_joint(T.build_model(cfg), data, steps=4))
    half = T.train_joint(T.build_model(cfg), data, steps=2)
    resumed = T.restore_state(T.parse_checkpoint(T.checkpoint_bytes(half)))
    T.run_phase(resumed, data, steps=4)
    assert T.checkpoint_bytes(resumed) == full


def split(blob):
    (n_head,) = struct.unpack_from("<Q", blob, 8)
    return json.loads(blob[16:16 + n_head]), blob[16 + n_head:]


def join(manifest, rest, version=T.FORMAT_VERSION):
    head = json.dumps(manifest, sort_keys=True).encode()
    return T.MAGIC + struct.pack("<I", version) + struct.pack("<Q", len(head)) + head + rest


@pytest.fixture(scope="module")
def blob(samples):
    cfg = small_cfg()
    return T.checkpoint_bytes(T.new_state(T.build_model(cfg), "joint"))


def test_checkpoint_bad_magic(blob):
    with pytest.raises(T.CheckpointFormatError):
        T.parse_checkpoint(b"XXXX" + blob[4:])


def test_checkpoint_version_mismatch(blob):
    manifest, rest = split(blob)
    with pytest.raises(T.CheckpointFormatError):
        T.parse_checkpoint(join(manifest, rest, version=2))


def test_checkpoint_truncated(blob):
    for cut in (10, 40, len(blob) - 1):
        with pytest.raises(T.CheckpointFormatError):
            T.parse_checkpoint(blob[:cut])
    with pytest.raises(T.CheckpointFormatError):
        T.parse_checkpoint(blob + b"\0")


def test_checkpoint_wrong_shape(blob):
    manifest, rest = split(blob)
    entry = next(e for e in manifest["registry"] if len(e["shape"]) == 2 and e["shape"][0] != e["shape"][1])
    entry["shape"] = [entry["shape"][0] + 1, entry["shape"][1]]
    with pytest.raises(T.RegistryError):
        T.parse_checkpoint(join(manifest, rest))
    manifest, rest = split(blob)
    entry = next(e for e in manifest["registry"] if len(e["shape"]) == 2 and e["shape"][0] != e["shape"][1])
    entry["shape"] = entry["shape"][::-1]
    ckpt = T.parse_checkpoint(join(manifest, rest))
    with pytest.raises(T.RegistryError):
        T.restore_model(ckpt)


def test_metrics_csv_round_trip(tmp_path):
    rows = [["a", 0, 0.0, 1.5, 15.0, 1e-3], ["joint", 1, 0.25, 0.1, 1.25, 3e-4]]
    T.write_metrics_csv(rows, tmp_path / "m.csv")
    assert T.read_metrics_csv(tmp_path / "m.csv") == rows
    assert (tmp_path / "m.csv").read_text().splitlines()[0] == ",".join(T.METRIC_COLUMNS)
