import json

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from dtp.checkpoint import load_checkpoint, save_checkpoint
from dtp.config import RunConfig, Toggles, TrainConfig, desk_preset, dump_config, load_config
from dtp.trainer import DataAccessGuard, DataError, LifelongTrainer, RehearsalError, pk_batches

from conftest import tiny_config

BASELINE = Toggles(dpf=False, tfa=False, kd=False, lkd=False)


def _snapshot(module):
    return {k: v.copy() for k, v in module.state_dict().items()}


def _same(a, b):
    return a.keys() == b.keys() and all(np.array_equal(a[k], b[k]) for k in a)


@given(st.integers(1, 6), st.integers(1, 4), st.integers(0, 1000))
def test_pk_batches_structure(p, k, seed):
    rng = np.random.default_rng(seed)
    labels = np.repeat(np.arange(7), rng.integers(1, 9, 7))
    for batch in pk_batches(labels, p, k, rng):
        ids, counts = np.unique(labels[batch], return_counts=True)
        assert len(ids) == min(p, 7)
        assert np.all(counts == k)


def test_access_guard_blocks_other_domains(tiny_stream):
    guard = DataAccessGuard(tiny_stream)
    guard.begin(0)
    guard.train_split(0)
    with pytest.raises(RehearsalError):
        guard.train_split(1)
    guard.begin(1)
    for fn in (guard.train_split, guard.captions, guard.train_identities):
        with pytest.raises(RehearsalError):
            fn(0)
    guard.test_splits(0)  # evaluation data stays readable


def test_stage1_leaves_image_side_untouched(tiny_stream):
    tr = LifelongTrainer(tiny_config(), tiny_stream)
    tr.guard.begin(0)
    tr.model.reinit_domain(tr.guard.train_identities(0), tr.rng)
    image, head = _snapshot(tr.model.image), _snapshot(tr.model.head)
    text = _snapshot(tr.model.text)
    tr.train_stage1(0)
    assert _same(image, _snapshot(tr.model.image))
    assert _same(head, _snapshot(tr.model.head))
    assert not _same(text, _snapshot(tr.model.text))


def test_domain_boundary_reinitialises_prompts_and_head(tiny_stream):
    tr = LifelongTrainer(tiny_config(), tiny_stream)
    seen = []
    original = tr.model.reinit_domain

    def spy(ids, rng):
        original(ids, rng)
        seen.append((list(ids), tr.model.pkp.prompts.data.copy(), tr.model.head.weight.data.copy()))

    tr.model.reinit_domain = spy
    tr.run()
    assert [s[0] for s in seen] == [d.train_identity_ids for d in tiny_stream.seen]
    assert seen[0][1].shape == (8, 4, 16) and seen[0][2].shape == (16, 8)
    assert not np.allclose(seen[0][1], seen[1][1])


def test_teacher_is_never_mutated(tiny_stream):
    tr = LifelongTrainer(tiny_config(), tiny_stream)
    tr.run(max_stages=2)
    teacher = tr.teacher
    before = {**_snapshot(teacher.image), **{"head." + k: v for k, v in _snapshot(teacher.head).items()}}
    _continue(tr)  # remaining stages on the same trainer, teacher held fixed
    after = {**_snapshot(teacher.image), **{"head." + k: v for k, v in _snapshot(teacher.head).items()}}
    assert _same(before, after)
    assert teacher.image is not tr.model.image


def _continue(tr):
    while tr.position < len(tr.order):
        did = tr.order[tr.position]
        tr.guard.begin(did)
        if tr.stages_done == 0:
            tr.model.reinit_domain(tr.guard.train_identities(did), tr.rng)
            tr.train_stage1(did)
        tr.train_stage2(did)
        tr.position += 1
        tr.stages_done = 0


def test_training_never_reads_past_domain_data(tiny_stream, monkeypatch):
    calls = []
    original = DataAccessGuard.train_split

    def record(self, did):
        calls.append((self.active, did))
        return original(self, did)

    monkeypatch.setattr(DataAccessGuard, "train_split", record)
    LifelongTrainer(tiny_config(), tiny_stream).run()
    assert calls and all(active == did for active, did in calls)


def test_loss_terms_follow_toggles(tiny_stream):
    expected = {
        "baseline": (BASELINE, {"id", "tri", "global"}),
        "dpf": (Toggles(dpf=True, tfa=False, kd=False, lkd=False), {"id", "tri", "global"}),
        "tfa": (Toggles(dpf=True, tfa=True, kd=False, lkd=False), {"id", "tri", "global", "partial"}),
        "full": (Toggles(), {"id", "tri", "global", "partial", "lkd"}),
    }
    for name, (toggles, terms) in expected.items():
        rec = LifelongTrainer(tiny_config(toggles=toggles), tiny_stream).run()
        later = [e for e in rec.log if e["stage"] == 2 and e["position"] == 1]
        first = [e for e in rec.log if e["stage"] == 2 and e["position"] == 0]
        assert all(set(e["losses"]) == terms for e in later), name
        assert all("lkd" not in e["losses"] for e in first), name
        assert all(set(e["losses"]) == {"global"} for e in rec.log if e["stage"] == 1), name


def test_lkd_learns_temperatures_and_kd_does_not(tiny_stream):
    rec = LifelongTrainer(tiny_config(), tiny_stream).run()
    assert rec.log[-1]["delta1"] != 0.0
    rec = LifelongTrainer(tiny_config(toggles=Toggles(lkd=False)), tiny_stream).run()
    assert rec.log[-1]["delta1"] == 0.0 and "lkd" in rec.log[-1]["losses"]


def test_unseen_domain_cannot_be_trained(tiny_stream):
    with pytest.raises(DataError):
        LifelongTrainer(tiny_config(training_order=[0, 2]), tiny_stream)
    with pytest.raises(DataError):
        LifelongTrainer(tiny_config(training_order=[0, 0]), tiny_stream)


def test_training_order_is_respected(tiny_stream):
    rec = LifelongTrainer(tiny_config(training_order=[1, 0]), tiny_stream).run()
    assert [r.trained_domain for r in rec.reports] == [1, 0]
    assert {r["domain"] for r in rec.reports[0].records} == {1, 2}


def test_run_writes_artifacts_and_resumes(tiny_stream, tmp_path):
    cfg = tiny_config()
    full = LifelongTrainer(cfg, tiny_stream, tmp_path / "a").run()
    LifelongTrainer(cfg, tiny_stream, tmp_path / "b").run(max_stages=3)
    resumed = LifelongTrainer(cfg, tiny_stream, tmp_path / "b").run(resume=True)
    assert json.dumps(full.log) == json.dumps(resumed.log)
    lines = (tmp_path / "b" / "run_record.jsonl").read_text().splitlines()
    assert [json.loads(x) for x in lines] == full.log
    assert sorted(p.name for p in (tmp_path / "b" / "metrics").iterdir()) == ["stage_00.json", "stage_01.json"]
    assert load_config(tmp_path / "b" / "config.yaml") == cfg


def test_evaluation_restore_matches_final_report(tiny_stream, tmp_path):
    cfg = tiny_config()
    rec = LifelongTrainer(cfg, tiny_stream, tmp_path).run()
    tr = LifelongTrainer(cfg, tiny_stream, tmp_path)
    assert tr.restore_for_evaluation() == 1
    assert tr.evaluate_all().records == rec.reports[-1].records


def test_checkpoint_round_trip_keeps_shapes(tmp_path):
    arrays = {"a.w": np.arange(6.0).reshape(2, 3), "scale": np.array(0.5), "b.v": np.zeros(0)}
    save_checkpoint(tmp_path / "c", arrays, {"k": 1})
    back, meta = load_checkpoint(tmp_path / "c")
    assert meta == {"k": 1}
    for k, v in arrays.items():
        assert back[k].shape == v.shape and np.array_equal(back[k], v)
    manifest = json.loads((tmp_path / "c" / "manifest.json").read_text())
    assert manifest["modules"]["a"] == {"w": [2, 3]}


def test_config_validation():
    with pytest.raises(ValueError):
        Toggles(kd=False, lkd=True)
    with pytest.raises(ValueError):
        Toggles(dpf=False, tfa=True, kd=False, lkd=False)
    with pytest.raises(ValueError):
        TrainConfig(lr=0)
    with pytest.raises(ValueError):
        RunConfig(trian={})
    cfg = desk_preset(seed=4)
    assert cfg.train.batch_size == 16 and cfg.seed == 4
    assert RunConfig.model_validate(__import__("yaml").safe_load(dump_config(cfg))) == cfg


def test_full_scale_constants_are_config_defaults():
    tc = TrainConfig()
    assert (tc.lr, tc.weight_decay, tc.warmup_start, tc.stage1_epochs, tc.stage2_epochs) == (3.5e-4, 1e-4, 0.01, 60, 60)
    assert tc.batch_size == 128 and tc.lkd_weight == 0.1
