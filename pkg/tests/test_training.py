import json

import numpy as np
import pytest

from dcmt.errors import CheckpointError, ContractError
from dcmt.model import CrossModalModel, ModelConfig
from dcmt.synthdata import DatasetConfig, generate_items
from dcmt.tensor import Tensor
from dcmt.training import (
    Adam,
    load_checkpoint,
    save_checkpoint,
    train,
    train_rng,
)

TINY = ModelConfig(
    d=4, n_heads=1, levels=2, rounds=2, window=2, detector_hidden=3,
    seed=7, max_text_len=64, max_image_patches=16,
)


def tiny_items(seed=3, matching=4, vqa=0):
    cfg = DatasetConfig(seed=seed, matching=matching, vqa=vqa, grid_size=4, max_objects=2)
    return generate_items(cfg)


def snapshot(model):
    return {k: p.data.copy() for k, p in model.named_parameters().items()}


def assert_same_params(model, snap):
    for k, p in model.named_parameters().items():
        assert np.array_equal(p.data, snap[k]), k


# ------------------------------------------------------------------ adam


def test_adam_zero_gradient_leaves_parameters_unchanged():
    p = Tensor(np.array([1.0, -2.0, 3.0]), requires_grad=True)
    p.grad = np.zeros(3)
    opt = Adam({"p": p})
    opt.step()
    assert np.array_equal(p.data, [1.0, -2.0, 3.0])


def test_adam_missing_gradient_counts_as_zero():
    p = Tensor(np.array([4.0]), requires_grad=True)
    p.grad = None
    Adam({"p": p}).step()
    assert p.data[0] == 4.0


def test_adam_zero_lr_leaves_parameters_unchanged():
    p = Tensor(np.array([1.5]), requires_grad=True)
    p.grad = np.array([7.0])
    opt = Adam({"p": p}, lr=0.0)
    opt.step()
    assert p.data[0] == 1.5


def test_adam_drives_quadratic_toward_zero():
    # f(p) = p^2, p0 = 1, lr = 0.1: two hundred steps land well inside |p| < 0.1
    p = Tensor(np.array([1.0]), requires_grad=True)
    opt = Adam({"p": p}, lr=0.1)
    for _ in range(200):
        p.grad = 2.0 * p.data
        opt.step()
    assert abs(p.data[0]) < 0.1


def test_adam_state_roundtrip_restores_moments():
    p = Tensor(np.array([1.0, 2.0]), requires_grad=True)
    opt = Adam({"p": p}, lr=0.01)
    p.grad = np.array([0.3, -0.4])
    opt.step()
    state = opt.state_dict()
    q = Tensor(p.data.copy(), requires_grad=True)
    opt2 = Adam.from_state({"p": q}, state)
    assert opt2.step_count == 1
    assert np.array_equal(opt2.m["p"], opt.m["p"])
    assert np.array_equal(opt2.v["p"], opt.v["p"])


def test_adam_from_state_rejects_wrong_parameter_set():
    p = Tensor(np.array([1.0]), requires_grad=True)
    state = Adam({"p": p}).state_dict()
    state["step_count"] = 0
    with pytest.raises(CheckpointError):
        Adam.from_state({"q": p}, state)


# ------------------------------------------------------------------ train loop


def test_train_rejects_negative_steps():
    model = CrossModalModel(TINY)
    with pytest.raises(ContractError):
        train(model, tiny_items(), -1)


def test_train_rejects_untrainable_dataset():
    model = CrossModalModel(TINY)
    probes = generate_items(DatasetConfig(seed=5, context_probes=2, grid_size=4, max_objects=2))
    with pytest.raises(ContractError):
        train(model, probes, 1)


def test_train_zero_steps_is_identity(tmp_path):
    model = CrossModalModel(TINY)
    before = snapshot(model)
    log = tmp_path / "log.jsonl"
    out = train(model, tiny_items(), 0, log_path=str(log))
    assert out == {"losses": [], "skipped": 0, "final_step": 0}
    assert log.read_text() == ""
    assert_same_params(model, before)


def test_train_loss_decreases_on_tiny_overfit():
    model = CrossModalModel(TINY)
    out = train(model, tiny_items(matching=4), 30, batch_size=4)
    assert len(out["losses"]) == 30
    assert np.mean(out["losses"][-10:]) < out["losses"][0]


def test_train_alternates_kinds_round_robin(tmp_path):
    model = CrossModalModel(TINY)
    log = tmp_path / "log.jsonl"
    train(model, tiny_items(matching=3, vqa=3), 6, batch_size=2, log_path=str(log))
    kinds = [json.loads(line)["kind"] for line in log.read_text().splitlines()]
    assert kinds == ["matching", "vqa", "matching", "vqa", "matching", "vqa"]


def test_train_same_seed_runs_are_bit_identical(tmp_path):
    outs = []
    for tag in ("a", "b"):
        model = CrossModalModel(TINY)
        opt = Adam(model.named_parameters())
        rng = train_rng(model.config)
        log = tmp_path / f"log_{tag}.jsonl"
        ckpt = tmp_path / f"ckpt_{tag}.json"
        train(model, tiny_items(), 8, batch_size=2, opt=opt, rng=rng, log_path=str(log))
        save_checkpoint(model, opt, rng, 8, str(ckpt))
        outs.append((log.read_bytes(), ckpt.read_bytes()))
    assert outs[0][0] == outs[1][0]
    assert outs[0][1] == outs[1][1]


def test_train_log_records_expected_fields(tmp_path):
    model = CrossModalModel(TINY)
    log = tmp_path / "log.jsonl"
    train(model, tiny_items(), 2, batch_size=2, log_path=str(log))
    rows = [json.loads(line) for line in log.read_text().splitlines()]
    assert len(rows) == 2
    assert rows[0]["step"] == 0 and rows[1]["step"] == 1
    for row in rows:
        assert row["skipped"] is False
        for key in ("loss", "task_loss", "align_loss", "mi_bound", "tau"):
            assert isinstance(row[key], float)


def test_overflow_skips_step_without_update(tmp_path):
    model = CrossModalModel(TINY)
    # slam the level-0 text detector open: near-certain breaks everywhere
    # push expected segments past the slot budget on every caption
    for det in model.detectors["text"]:
        det.b2.data[:] = 6.0
    before = snapshot(model)
    log = tmp_path / "log.jsonl"
    out = train(model, tiny_items(), 3, batch_size=2, log_path=str(log))
    assert out["skipped"] == 3
    assert out["losses"] == []
    assert_same_params(model, before)
    rows = [json.loads(line) for line in log.read_text().splitlines()]
    assert [r["step"] for r in rows] == [0, 1, 2]
    for row in rows:
        assert row["skipped"] is True
        assert "boundary mass" in row["reason"]


# ------------------------------------------------------------------ checkpoints


def test_checkpoint_roundtrip_restores_everything(tmp_path):
    model = CrossModalModel(TINY)
    opt = Adam(model.named_parameters(), lr=0.002)
    rng = train_rng(model.config)
    train(model, tiny_items(), 4, batch_size=2, opt=opt, rng=rng)
    path = tmp_path / "ckpt.json"
    save_checkpoint(model, opt, rng, 4, str(path))

    loaded, opt2, rng2, step = load_checkpoint(str(path))
    assert step == 4
    assert loaded.config == model.config
    assert_same_params(loaded, snapshot(model))
    assert opt2.lr == opt.lr and opt2.step_count == opt.step_count
    for k in opt.m:
        assert np.array_equal(opt2.m[k], opt.m[k])
        assert np.array_equal(opt2.v[k], opt.v[k])
    assert rng2.state_dict() == rng.state_dict()


def test_checkpoint_load_then_save_is_byte_identical(tmp_path):
    model = CrossModalModel(TINY)
    opt = Adam(model.named_parameters())
    rng = train_rng(model.config)
    train(model, tiny_items(), 3, batch_size=2, opt=opt, rng=rng)
    first = tmp_path / "first.json"
    second = tmp_path / "second.json"
    save_checkpoint(model, opt, rng, 3, str(first))
    loaded, opt2, rng2, step = load_checkpoint(str(first))
    save_checkpoint(loaded, opt2, rng2, step, str(second))
    assert first.read_bytes() == second.read_bytes()


def test_checkpoint_version_mismatch_is_rejected(tmp_path):
    model = CrossModalModel(TINY)
    opt = Adam(model.named_parameters())
    path = tmp_path / "ckpt.json"
    save_checkpoint(model, opt, train_rng(model.config), 0, str(path))
    obj = json.loads(path.read_text())
    obj["format_version"] = 99
    path.write_text(json.dumps(obj))
    with pytest.raises(CheckpointError, match="99"):
        load_checkpoint(str(path))


def test_checkpoint_truncated_file_reports_byte_offset(tmp_path):
    model = CrossModalModel(TINY)
    opt = Adam(model.named_parameters())
    path = tmp_path / "ckpt.json"
    save_checkpoint(model, opt, train_rng(model.config), 0, str(path))
    blob = path.read_bytes()[:200]
    path.write_bytes(blob)
    with pytest.raises(CheckpointError, match="byte"):
        load_checkpoint(str(path))


def test_checkpoint_tensor_table_mismatch_is_rejected(tmp_path):
    model = CrossModalModel(TINY)
    opt = Adam(model.named_parameters())
    path = tmp_path / "ckpt.json"
    save_checkpoint(model, opt, train_rng(model.config), 0, str(path))
    obj = json.loads(path.read_text())
    obj["tensors"].pop("head.b")
    path.write_text(json.dumps(obj))
    with pytest.raises(CheckpointError, match="head.b"):
        load_checkpoint(str(path))


def test_checkpoint_shape_mismatch_is_rejected(tmp_path):
    model = CrossModalModel(TINY)
    opt = Adam(model.named_parameters())
    path = tmp_path / "ckpt.json"
    save_checkpoint(model, opt, train_rng(model.config), 0, str(path))
    obj = json.loads(path.read_text())
    obj["tensors"]["head.b"]["shape"] = [3]
    obj["tensors"]["head.b"]["data"] = [0.0, 0.0, 0.0]
    path.write_text(json.dumps(obj))
    with pytest.raises(CheckpointError, match="head.b"):
        load_checkpoint(str(path))


def test_resume_matches_uninterrupted_run(tmp_path):
    items = tiny_items(matching=4, vqa=2)

    # uninterrupted reference: 9 steps in one go
    ref = CrossModalModel(TINY)
    ref_opt = Adam(ref.named_parameters())
    ref_rng = train_rng(ref.config)
    ref_log = tmp_path / "ref.jsonl"
    train(ref, items, 9, batch_size=2, opt=ref_opt, rng=ref_rng, log_path=str(ref_log))
    ref_ckpt = tmp_path / "ref.json"
    save_checkpoint(ref, ref_opt, ref_rng, 9, str(ref_ckpt))

    # interrupted run: 5 steps, checkpoint, reload, 4 more
    part = CrossModalModel(TINY)
    part_opt = Adam(part.named_parameters())
    part_rng = train_rng(part.config)
    train(part, items, 5, batch_size=2, opt=part_opt, rng=part_rng)
    mid = tmp_path / "mid.json"
    save_checkpoint(part, part_opt, part_rng, 5, str(mid))

    resumed, opt2, rng2, step = load_checkpoint(str(mid))
    tail_log = tmp_path / "tail.jsonl"
    train(resumed, items, 4, batch_size=2, opt=opt2, rng=rng2,
          start_step=step, log_path=str(tail_log))
    final = tmp_path / "final.json"
    save_checkpoint(resumed, opt2, rng2, 9, str(final))

    assert final.read_bytes() == ref_ckpt.read_bytes()
    ref_tail = ref_log.read_text().splitlines()[5:]
    assert tail_log.read_text().splitlines() == ref_tail
