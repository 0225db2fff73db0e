"""End-to-end acceptance checks, one test per criterion.

Each test records a one-line verdict that the terminal summary prints.
"""

import json
import math
import time
from contextlib import contextmanager

import numpy as np
import pytest

from dtp import autograd as ag
from dtp import losses as L
from dtp.autograd import Tensor
from dtp.config import Toggles, desk_preset
from dtp.encoders import ImageEncoder, TextEncoder, local_image_features
from dtp.evaluation import aggregate, rank_gallery
from dtp.fusion import FusionBlock, fuse
from dtp.gradcheck import check_gradients
from dtp.model import Teacher
from dtp.synth import generate_stream
from dtp.trainer import DataAccessGuard, LifelongTrainer, RehearsalError

from conftest import ACCEPTANCE, tiny_config
from test_evaluation import naive_ap
from test_losses import label_vectors, supcon_bruteforce

SEEDS = (0, 1, 2)
FULL = Toggles()
BASELINE = Toggles(dpf=False, tfa=False, kd=False, lkd=False)


@contextmanager
def criterion(cid: int):
    detail = {"text": ""}
    try:
        yield detail
    except BaseException as exc:
        ACCEPTANCE[cid] = (False, f"{detail['text']} ({type(exc).__name__}: {str(exc).splitlines()[0][:120]})")
        raise
    ACCEPTANCE[cid] = (True, detail["text"])


# -- 1 ---------------------------------------------------------------------------


def _gradient_cases(seed):
    r = np.random.default_rng(seed)
    fi, ft = ag.parameter(r.normal(size=(6, 8))), ag.parameter(r.normal(size=(6, 8)))
    scale = ag.parameter(r.uniform(-0.5, 0.5))
    li, lt = ag.parameter(r.normal(size=(6, 4, 8))), ag.parameter(r.normal(size=(6, 4, 8)))
    zs, zt = ag.parameter(r.normal(size=(6, 5))), Tensor(r.normal(size=(6, 5)))
    d1, d2 = ag.parameter(r.uniform(-0.5, 0.5)), ag.parameter(r.uniform(-0.5, 0.5))
    labels = [0, 0, 1, 1, 2, 2]
    img = ImageEncoder(5, 8, r, layers=2, heads=2)
    txt = TextEncoder(8, r, layers=1, heads=2, max_len=12)
    block = FusionBlock(8, r, heads=2, encoder_layers=1, decoder_layers=1)
    regions = ag.parameter(r.normal(size=(2, 4, 5)))
    ip, pkp = ag.parameter(r.normal(size=(2, 5, 8))), ag.parameter(r.normal(size=(2, 3, 8)))
    c = r.normal(size=(2, 8))
    c4 = r.normal(size=(2, 4, 8))
    c3 = r.normal(size=(2, 3, 8))

    def image_global():
        return (img(regions)[0] * c).sum()

    def image_local():
        _, hidden, cls = img(regions)
        return (local_image_features(img, hidden, cls) * c4).sum()

    return {
        "supcon": (lambda: L.supcon(L.cosine_matrix(fi, ft), labels, 2.0), {"fi": fi, "ft": ft}),
        "global": (lambda: L.global_loss(fi, ft, labels, scale), {"fi": fi, "ft": ft, "scale": scale}),
        "partial": (lambda: L.partial_loss(li, lt), {"li": li, "lt": lt}),
        "id": (lambda: L.id_loss(zs, [0, 1, 2, 3, 4, 0]), {"zs": zs}),
        "triplet": (lambda: L.triplet_loss(fi, labels), {"fi": fi}),
        "kd": (lambda: L.kd_loss(zs, zt, 2.0), {"zs": zs}),
        "lkd": (lambda: L.lkd_loss(zs, zt, L.TemperaturePair(2.0, d1, d2)), {"zs": zs, "delta1": d1, "delta2": d2}),
        "image_encoder": (image_global, {"regions": regions, **img.named_parameters()}),
        "image_local": (image_local, {"regions": regions, **img.named_parameters()}),
        "fusion": (lambda: (fuse(ip, pkp, block) * c3).sum(), {"ip": ip, "pkp": pkp, **block.named_parameters()}),
        "text_encoder": (lambda: (txt(ip)[0] * c).sum(), {"ip": ip, **txt.named_parameters()}),
    }


def test_criterion_1_gradient_suite():
    with criterion(1) as c:
        start = time.perf_counter()
        worst = {}
        for seed in SEEDS:
            for name, (fn, params) in _gradient_cases(seed).items():
                errs = check_gradients(fn, params, samples_per_param=8, rng=np.random.default_rng(seed))
                worst[name] = max(worst.get(name, 0.0), max(errs.values()))
        elapsed = time.perf_counter() - start
        name, err = max(worst.items(), key=lambda kv: kv[1])
        c["text"] = f"{len(worst)} cases x {len(SEEDS)} instances, worst rel err {err:.1e} ({name}), {elapsed:.1f}s"
        assert err < 1e-4, worst
        assert elapsed < 60


# -- 2 ---------------------------------------------------------------------------


def test_criterion_2_reduction_identities():
    with criterion(2) as c:
        r = np.random.default_rng(0)
        for _ in range(20):
            s, t = Tensor(r.normal(size=(4, 6))), Tensor(r.normal(size=(4, 6)))
            base = float(r.uniform(0.5, 6.0))
            assert L.lkd_loss(s, t, L.TemperaturePair.create(base)).item() == L.kd_loss(s, t, base).item()
            x = Tensor(r.normal(size=(3, 4, 6)))
            assert abs(L.partial_loss(x, x).item()) < 1e-12
        block = FusionBlock(8, r, heads=2, encoder_layers=2, decoder_layers=2)
        block.zero_attention()
        pkp = Tensor(r.normal(size=(2, 4, 8)))
        out = fuse(Tensor(r.normal(size=(2, 7, 8))), pkp, block).data
        x = pkp
        for layer in block.decoder:
            x = x + layer.ff(layer.ln3(x))
        assert np.array_equal(out, x.data)
        c["text"] = "lkd(0,0)==kd bit-equal, partial(x,x)=0, zeroed fusion == residual path"


# -- 3 ---------------------------------------------------------------------------


def test_criterion_3_oracle_equivalence():
    with criterion(3) as c:
        r = np.random.default_rng(0)
        n_sup = 0
        for labels in label_vectors(6):
            sim = r.uniform(-1, 1, (len(labels), len(labels)))
            got = L.supcon(Tensor(sim), labels, 1.7).item()
            assert math.isclose(got, supcon_bruteforce(sim, labels, 1.7), rel_tol=1e-12, abs_tol=1e-12)
            n_sup += 1
        n_rank = 0
        for n_gallery in range(2, 26):
            for rep in range(6):
                g_ids = r.integers(0, 3, n_gallery)
                g_cams = r.integers(0, 2, n_gallery)
                sim = np.round(r.normal(size=(3, n_gallery)), 1 if rep % 2 else 3)
                q_ids, q_cams = np.full(3, g_ids[0]), np.full(3, 1 - g_cams[0])
                for exclude in (False, True):
                    res = rank_gallery(sim, q_ids, g_ids, q_cams, g_cams, exclude)
                    for q in range(3):
                        ap, r1 = naive_ap(sim[q], g_ids, g_cams, q_ids[q], q_cams[q], exclude)
                        assert res.average_precision[q] == ap
                        assert (res.first_match_rank[q] == 0) == r1
                        n_rank += 1
        c["text"] = f"supcon {n_sup} label vectors (B<=6), ranking {n_rank} queries (gallery<=25), exact"


# -- 4 ---------------------------------------------------------------------------


def test_criterion_4_table_arithmetic():
    with criterion(4) as c:
        a = aggregate([(v, v) for v in [69.1, 90.5, 65.4, 39.5, 73.3]])[0]
        b = aggregate([(v, v) for v in [85.4, 91.6, 79.6, 66.4, 75.5]])[1]
        c["text"] = f"{a:.1f} and {b:.1f}"
        assert f"{a:.1f}" == "67.6" and f"{b:.1f}" == "79.7"


# -- 5 ---------------------------------------------------------------------------


def test_criterion_5_training_contracts():
    with criterion(5) as c:
        stream = generate_stream(tiny_config().generator, 0)
        tr = LifelongTrainer(tiny_config(), stream)
        reads, pkps = [], []
        original_split = DataAccessGuard.train_split
        tr.guard.train_split = lambda did: (reads.append((tr.guard.active, did)), original_split(tr.guard, did))[1]
        original_reinit = tr.model.reinit_domain

        def reinit(ids, rng):
            original_reinit(ids, rng)
            pkps.append((list(ids), tr.model.pkp.prompts.data.copy(), tr.model.head.weight.shape))

        tr.model.reinit_domain = reinit
        tr.guard.begin(0)
        tr.model.reinit_domain(tr.guard.train_identities(0), tr.rng)
        before = {k: v.copy() for k, v in tr.model.image.state_dict().items()}
        tr.train_stage1(0)
        stage1_frozen = all(np.array_equal(before[k], v) for k, v in tr.model.image.state_dict().items())
        tr.train_stage2(0)
        tr.position, tr.stages_done = 1, 0
        tr.teacher = Teacher(tr.model.image, tr.model.head)
        snap = {k: v.copy() for k, v in {**tr.teacher.image.state_dict(), **tr.teacher.head.state_dict()}.items()}
        tr.guard.begin(1)
        tr.model.reinit_domain(tr.guard.train_identities(1), tr.rng)
        tr.train_stage1(1)
        tr.train_stage2(1)
        after = {**tr.teacher.image.state_dict(), **tr.teacher.head.state_dict()}
        teacher_fixed = all(np.array_equal(snap[k], after[k]) for k in snap)
        guard_ok = bool(reads) and all(a == d for a, d in reads)
        with pytest.raises(RehearsalError):
            tr.guard.train_split(0)
        fresh = [p[0] for p in pkps] == [d.train_identity_ids for d in stream.seen] and not np.allclose(pkps[0][1], pkps[1][1])
        c["text"] = f"stage-I image frozen={stage1_frozen}, reinit={fresh}, teacher fixed={teacher_fixed}, guard={guard_ok}"
        assert stage1_frozen and fresh and teacher_fixed and guard_ok


# -- 6, 7 ----------------------------------------------------------------------------


@pytest.fixture(scope="module")
def desk_runs():
    start = time.perf_counter()
    runs = {}
    for seed in SEEDS:
        cfg = desk_preset(seed=seed)
        stream = generate_stream(cfg.generator, seed)
        for name, toggles, mode in (("dtp", FULL, "dynamic"), ("baseline", BASELINE, "dynamic"), ("addition", FULL, "addition")):
            run_cfg = cfg.model_copy(update={"toggles": toggles, "fusion_mode": mode})
            runs[name, seed] = LifelongTrainer(run_cfg, stream).run()
    return runs, time.perf_counter() - start


def _first_domain_rank1(rec):
    return 100 * rec.reports[-1].metric(rec.order[0])["rank1"]


def test_criterion_6_forgetting_mitigation(desk_runs):
    runs, elapsed = desk_runs
    with criterion(6) as c:
        first = {k: np.mean([_first_domain_rank1(runs[k, s]) for s in SEEDS]) for k in ("dtp", "baseline")}
        unseen = {k: np.mean([100 * runs[k, s].reports[-1].unseen_average[1] for s in SEEDS]) for k in ("dtp", "baseline")}
        c["text"] = (
            f"first-domain R1 dtp {first['dtp']:.1f} vs baseline {first['baseline']:.1f} (need +5), "
            f"unseen R1 {unseen['dtp']:.1f} vs {unseen['baseline']:.1f}, {elapsed:.0f}s for all desk runs"
        )
        assert first["dtp"] >= first["baseline"] + 5.0
        assert unseen["dtp"] >= unseen["baseline"]
        assert elapsed < 15 * 60


def test_criterion_7_ablation_smoke(desk_runs):
    runs, _ = desk_runs
    with criterion(7) as c:
        seen = {k: np.mean([100 * runs[k, s].reports[-1].seen_average[1] for s in SEEDS]) for k in ("dtp", "addition")}
        expected = {
            "dtp": {"id", "tri", "global", "partial", "lkd"},
            "addition": {"id", "tri", "global", "partial", "lkd"},
            "baseline": {"id", "tri", "global"},
        }
        for (name, _), rec in runs.items():
            later = [e for e in rec.log if e["stage"] == 2 and e["position"] > 0]
            assert later and all(set(e["losses"]) == expected[name] for e in later), name
            assert all(math.isfinite(v) for e in later for v in e["losses"].values())
        c["text"] = f"seen R1 dynamic {seen['dtp']:.1f} vs addition {seen['addition']:.1f} (band 2), loss terms per toggle set ok"
        assert seen["dtp"] >= seen["addition"] - 2.0


# -- 8 ---------------------------------------------------------------------------


def test_criterion_8_determinism(desk_runs):
    runs, _ = desk_runs
    with criterion(8) as c:
        cfg = desk_preset(seed=0)
        again = LifelongTrainer(cfg, generate_stream(cfg.generator, 0)).run()
        a, b = runs["dtp", 0].reports[-1].records, again.reports[-1].records
        diff = max(abs(x[k] - y[k]) for x, y in zip(a, b) for k in ("mAP", "rank1"))
        c["text"] = f"max metric difference across two runs {diff:.1e}"
        assert len(a) == len(b) and diff <= 1e-9
        assert [(x["domain"], x["split"]) for x in a] == [(y["domain"], y["split"]) for y in b]


# -- 9 ---------------------------------------------------------------------------


def test_criterion_9_resume_is_bit_exact(tmp_path):
    with criterion(9) as c:
        cfg = desk_preset(seed=0)
        stream = generate_stream(cfg.generator, 0)
        full = LifelongTrainer(cfg, stream, tmp_path / "full").run()
        LifelongTrainer(cfg, stream, tmp_path / "cut").run(max_stages=3)
        cut_len = len((tmp_path / "cut" / "run_record.jsonl").read_text().splitlines())
        resumed = LifelongTrainer(cfg, stream, tmp_path / "cut").run(resume=True)
        same_log = json.dumps(full.log) == json.dumps(resumed.log)
        on_disk = (tmp_path / "full" / "run_record.jsonl").read_bytes() == (tmp_path / "cut" / "run_record.jsonl").read_bytes()
        same_reports = [r.records for r in full.reports] == [r.records for r in resumed.reports]
        c["text"] = f"interrupted after {cut_len} logged steps; log equal={same_log}, file equal={on_disk}, reports equal={same_reports}"
        assert same_log and on_disk and same_reports
