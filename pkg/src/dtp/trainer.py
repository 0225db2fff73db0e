"""Two-stage per-domain training over an ordered, rehearsal-free domain stream."""

from __future__ import annotations

import json
import logging
import shutil
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import autograd as ag
from . import losses as L
from .autograd import ContractError
from .checkpoint import load_checkpoint, save_checkpoint
from .config import RunConfig, dump_config
from .evaluation import MetricReport, evaluate
from .fusion import FusionMode
from .model import DTPModel, Teacher
from .optim import Adam, warmup_steps_for
from .synth import Domain, DomainStream, Split
from .text import Vocabulary

log = logging.getLogger(__name__)


class RehearsalError(RuntimeError):
    """Training code asked for data of a domain other than the active one."""


class DataError(ValueError):
    pass


class DataAccessGuard:
    """Hands out training data for the active domain only; test splits are always readable."""

    def __init__(self, stream: DomainStream):
        self.stream = stream
        self.active: int | None = None

    def begin(self, domain_id: int) -> None:
        self.active = domain_id

    def _check(self, domain_id: int) -> Domain:
        if domain_id != self.active:
            raise RehearsalError(f"training data of domain {domain_id} requested while domain {self.active} is active")
        return self.stream.domain(domain_id)

    def train_split(self, domain_id: int) -> Split:
        return self._check(domain_id).train

    def captions(self, domain_id: int) -> dict[int, str]:
        return self._check(domain_id).captions

    def train_identities(self, domain_id: int) -> list[int]:
        return self._check(domain_id).train_identity_ids

    def test_splits(self, domain_id: int) -> tuple[Split, Split]:
        d = self.stream.domain(domain_id)
        return d.query, d.gallery


def pk_batches(labels: np.ndarray, ids_per_batch: int, instances: int, rng: np.random.Generator) -> list[np.ndarray]:
    """One epoch of batches, each holding K images of each of P distinct identities.

    Every identity's images are shuffled and cut into K-sized chunks (topped up
    by resampling); batches draw chunks until fewer than P identities have any
    left, so an image appears at most once per epoch apart from the top-up.
    """
    labels = np.asarray(labels)
    chunks: dict[int, list[np.ndarray]] = {}
    for pid in np.unique(labels):
        idx = rng.permutation(np.flatnonzero(labels == pid))
        if idx.size < instances:
            idx = np.concatenate([idx, rng.choice(idx, instances - idx.size, replace=True)])
        n_full = -(-idx.size // instances)
        pad = n_full * instances - idx.size
        if pad:
            idx = np.concatenate([idx, rng.choice(idx, pad, replace=False)])
        chunks[int(pid)] = list(idx.reshape(n_full, instances))
    p = min(ids_per_batch, len(chunks))
    batches = []
    while True:
        avail = sorted(k for k, v in chunks.items() if v)
        if len(avail) < p:
            break
        picked = rng.choice(avail, p, replace=False)
        batches.append(np.concatenate([chunks[int(k)].pop() for k in picked]))
    return batches


@dataclass
class RunRecord:
    log: list[dict] = field(default_factory=list)
    reports: list[MetricReport] = field(default_factory=list)
    order: list[int] = field(default_factory=list)


class LifelongTrainer:
    def __init__(self, config: RunConfig, stream: DomainStream, out_dir: str | Path | None = None):
        self.config = config
        self.stream = stream
        self.out_dir = Path(out_dir) if out_dir is not None else None
        self.toggles = config.toggles
        self.mode = FusionMode(config.fusion_mode)
        self.rng = np.random.default_rng(config.seed)
        self.vocab = Vocabulary()
        self.model = DTPModel(config.model, stream.config.region_dim, self.vocab, self.rng, config.train.logit_scale_init)
        self.teacher: Teacher | None = None
        self.guard = DataAccessGuard(stream)
        self.order = list(config.training_order) if config.training_order else [d.domain_id for d in stream.seen]
        for did in self.order:
            if stream.domain(did).unseen:
                raise DataError(f"domain {did} is flagged unseen and cannot be trained on")
        if len(set(self.order)) != len(self.order):
            raise DataError("training order repeats a domain")
        self.record = RunRecord(order=self.order)
        self.optimizer: Adam | None = None
        self.position = 0
        self.stages_done = 0  # stages completed at self.position

    # -- helpers ---------------------------------------------------------------

    def _log(self, entry: dict) -> None:
        self.record.log.append(entry)
        if self.out_dir is not None:
            with open(self.out_dir / "run_record.jsonl", "a", encoding="utf-8") as fh:
                fh.write(json.dumps(entry) + "\n")

    def _make_optimizer(self, params: dict, n_steps: int) -> Adam:
        tc = self.config.train
        return Adam(
            params,
            lr=tc.lr,
            weight_decay=tc.weight_decay,
            warmup_steps=warmup_steps_for(n_steps, tc.warmup_fraction),
            warmup_start=tc.warmup_start,
        )

    def _domain_labels(self, split: Split, identity_ids: list[int]) -> np.ndarray:
        index = {pid: i for i, pid in enumerate(identity_ids)}
        return np.array([index[int(p)] for p in split.identity_ids], dtype=np.int64)

    def _text(self, domain_id: int, identity_ids) -> tuple[ag.Tensor, ag.Tensor | None]:
        captions = self.guard.captions(domain_id)
        caps = [captions[int(i)] for i in identity_ids] if self.toggles.dpf else None
        return self.model.text_features(identity_ids, caps, self.toggles, self.mode)

    def _epochs(self, labels: np.ndarray, epochs: int) -> list[list[np.ndarray]]:
        tc = self.config.train
        return [pk_batches(labels, tc.ids_per_batch, tc.instances_per_id, self.rng) for _ in range(epochs)]

    def _scalars(self) -> dict:
        return {
            "logit_scale": self.model.logit_scale.item(),
            "delta1": self.model.delta1.item(),
            "delta2": self.model.delta2.item(),
        }

    # -- stages ----------------------------------------------------------------

    def train_stage1(self, domain_id: int) -> None:
        """Fit text-side modules to fixed image features with the global loss."""
        split = self.guard.train_split(domain_id)
        ids = self.guard.train_identities(domain_id)
        if len(split) == 0:
            raise DataError(f"domain {domain_id} has no training images")
        labels = self._domain_labels(split, ids)
        with ag.no_grad():
            f_img_all = ag.Tensor(self.model.embed(split.regions))
        epochs = self._epochs(labels, self.config.train.stage1_epochs)
        params = {**self.model.text_parameters(self.toggles, self.mode), "logit_scale": self.model.logit_scale}
        opt = self._make_optimizer(params, sum(len(e) for e in epochs))
        self.optimizer = opt
        step = 0
        for epoch, batches in enumerate(epochs):
            for batch in batches:
                lr = opt.current_lr()
                opt.zero_grad()
                uniq, inverse = np.unique(labels[batch], return_inverse=True)
                f_txt, _ = self._text(domain_id, [ids[u] for u in uniq])
                loss = L.global_loss(f_img_all[batch], f_txt[inverse], labels[batch], self.model.logit_scale)
                loss.backward()
                opt.step()
                value = loss.item()
                self._log({"domain": domain_id, "position": self.position, "stage": 1, "epoch": epoch, "step": step,
                           "lr": lr, "losses": {"global": value}, "total": value, **self._scalars()})
                step += 1

    def _stage2_params(self, kd_active: bool) -> dict:
        params = {
            **self.model.image_parameters(self.toggles),
            **self.model.head.named_parameters("head."),
            "logit_scale": self.model.logit_scale,
        }
        if kd_active and self.toggles.lkd:
            params["delta1"] = self.model.delta1
            params["delta2"] = self.model.delta2
        if self.config.train.unfreeze_text_stage2:
            params.update(self.model.text_parameters(self.toggles, self.mode))
        return params

    def train_stage2(self, domain_id: int) -> None:
        """Joint stage: id + triplet + global (+ partial) (+ weighted distillation)."""
        tc = self.config.train
        split = self.guard.train_split(domain_id)
        ids = self.guard.train_identities(domain_id)
        if len(split) == 0:
            raise DataError(f"domain {domain_id} has no training images")
        kd_active = self.toggles.kd and self.position > 0
        if kd_active and self.teacher is None:
            raise ContractError(f"distillation needs a teacher on domain position {self.position}")
        labels = self._domain_labels(split, ids)
        frozen_text = not tc.unfreeze_text_stage2
        if frozen_text:
            with ag.no_grad():
                txt_all, local_all = self._text(domain_id, ids)
        epochs = self._epochs(labels, tc.stage2_epochs)
        params = self._stage2_params(kd_active)
        opt = self._make_optimizer(params, sum(len(e) for e in epochs))
        self.optimizer = opt
        temps = L.TemperaturePair(tc.kd_temperature, self.model.delta1, self.model.delta2)
        step = 0
        for epoch, batches in enumerate(epochs):
            for batch in batches:
                lr = opt.current_lr()
                opt.zero_grad()
                y = labels[batch]
                regions = split.regions[batch]
                f_img, hidden, cls = self.model.image(regions)
                if frozen_text:
                    f_txt = txt_all[y]
                    local_txt = local_all[y] if local_all is not None else None
                else:
                    uniq, inverse = np.unique(y, return_inverse=True)
                    f_u, local_u = self._text(domain_id, [ids[u] for u in uniq])
                    f_txt = f_u[inverse]
                    local_txt = local_u[inverse] if local_u is not None else None
                terms = L.StageTwoTerms(
                    id=L.id_loss(self.model.head(f_img), y),
                    tri=L.triplet_loss(f_img, y, tc.triplet_margin),
                    global_=L.global_loss(f_img, f_txt, y, self.model.logit_scale),
                )
                if self.toggles.tfa:
                    terms.partial = L.partial_loss(self.model.local_image(hidden, cls), local_txt)
                if kd_active:
                    teacher_logits = self.teacher.logits(regions)
                    student_logits = self.teacher.head(f_img)
                    if self.toggles.lkd:
                        terms.lkd = L.lkd_loss(student_logits, teacher_logits, temps)
                    else:
                        terms.lkd = L.kd_loss(student_logits, teacher_logits, tc.kd_temperature)
                total, parts = L.stage2_loss(terms, tc.lkd_weight, tc.lambda_tfa)
                total.backward()
                opt.step()
                self._log({"domain": domain_id, "position": self.position, "stage": 2, "epoch": epoch, "step": step,
                           "lr": lr, "losses": parts, "total": total.item(), **self._scalars()})
                step += 1

    # -- evaluation ------------------------------------------------------------

    def evaluate_all(self) -> MetricReport:
        report = MetricReport(stage=self.position, trained_domain=self.order[self.position])
        targets = [(d, "seen") for d in self.order[: self.position + 1]] + [(d.domain_id, "unseen") for d in self.stream.unseen]
        for did, kind in targets:
            query, gallery = self.guard.test_splits(did)
            mAP, rank1, _ = evaluate(query, gallery, self.model.embed, self.config.camera_exclusion)
            report.add(did, kind, mAP, rank1, len(query), len(gallery))
        return report

    # -- checkpoints -------------------------------------------------------------

    def _ckpt_dir(self, position: int, stage: int) -> Path:
        return self.out_dir / "checkpoints" / f"{position:02d}_stage{stage}"

    def _save(self, stage: int) -> None:
        if self.out_dir is None:
            return
        arrays = dict(self.model.state_dict())
        if self.optimizer is not None:
            for k, v in self.optimizer.m.items():
                arrays[f"optimizer.m.{k}"] = v
            for k, v in self.optimizer.v.items():
                arrays[f"optimizer.v.{k}"] = v
        meta = {
            "position": self.position,
            "domain": self.order[self.position],
            "stage": stage,
            "rng_state": self.rng.bit_generator.state,
            "log_len": len(self.record.log),
            "n_reports": len(self.record.reports),
            "pkp_ids": self.model.pkp.identity_ids,
            "optimizer_steps": self.optimizer.step_count if self.optimizer else 0,
        }
        save_checkpoint(self._ckpt_dir(self.position, stage), arrays, meta)

    def _restore_model(self, path: Path) -> dict:
        arrays, meta = load_checkpoint(path)
        self.model.reinit_domain(meta["pkp_ids"], np.random.default_rng(0))
        self.model.load_state_dict({k: v for k, v in arrays.items() if not k.startswith("optimizer.")})
        return meta

    def teacher_from_checkpoint(self, position: int) -> Teacher:
        """Rebuild the frozen teacher from the final checkpoint of ``position``."""
        arrays, meta = load_checkpoint(self._ckpt_dir(position, 2))
        snapshot = DTPModel(self.config.model, self.stream.config.region_dim, self.vocab, np.random.default_rng(0))
        snapshot.reinit_domain(meta["pkp_ids"], np.random.default_rng(0))
        snapshot.load_state_dict({k: v for k, v in arrays.items() if not k.startswith("optimizer.")})
        return Teacher(snapshot.image, snapshot.head)

    def restore_for_evaluation(self) -> int:
        """Load the newest completed-domain checkpoint; returns its domain position."""
        done = [pos for pos, stage in self._checkpoint_tags() if stage == 2]
        if not done:
            raise DataError(f"no completed domain checkpoint under {self.out_dir}")
        self.position = max(done)
        self._restore_model(self._ckpt_dir(self.position, 2))
        return self.position

    def _checkpoint_tags(self) -> list[tuple[int, int]]:
        root = self.out_dir / "checkpoints" if self.out_dir else None
        if root is None or not root.exists():
            return []
        tags = []
        for p in root.iterdir():
            if (p / "manifest.json").exists():
                pos, _, stage = p.name.partition("_stage")
                tags.append((int(pos), int(stage)))
        return tags

    def latest_checkpoint(self) -> tuple[int, int] | None:
        tags = self._checkpoint_tags()
        return max(tags) if tags else None

    def resume(self) -> bool:
        latest = self.latest_checkpoint()
        if latest is None:
            return False
        position, stage = latest
        meta = self._restore_model(self._ckpt_dir(position, stage))
        self.rng.bit_generator.state = meta["rng_state"]
        lines = (self.out_dir / "run_record.jsonl").read_text(encoding="utf-8").splitlines()[: meta["log_len"]]
        (self.out_dir / "run_record.jsonl").write_text("".join(ln + "\n" for ln in lines), encoding="utf-8")
        self.record.log = [json.loads(ln) for ln in lines]
        self.record.reports = []
        metrics_dir = self.out_dir / "metrics"
        for k in range(meta["n_reports"]):
            records = json.loads((metrics_dir / f"stage_{k:02d}.json").read_text(encoding="utf-8"))
            self.record.reports.append(MetricReport(k, self.order[k], records))
        for stale in metrics_dir.glob("stage_*.json"):
            if int(stale.stem.split("_")[1]) >= meta["n_reports"]:
                stale.unlink()
        self.optimizer = None
        if stage == 2:
            self.position, self.stages_done = position + 1, 0
        else:
            self.position, self.stages_done = position, 1
        if self.position > 0 and self.toggles.kd:
            self.teacher = self.teacher_from_checkpoint(self.position - 1)
        log.info("resumed at domain position %d after %d stage(s)", self.position, self.stages_done)
        return True

    # -- outer loop --------------------------------------------------------------

    def _write_report(self, report: MetricReport) -> None:
        if self.out_dir is None:
            return
        d = self.out_dir / "metrics"
        d.mkdir(parents=True, exist_ok=True)
        (d / f"stage_{report.stage:02d}.json").write_text(json.dumps(report.records, indent=1), encoding="utf-8")

    def run(self, resume: bool = False, max_stages: int | None = None) -> RunRecord:
        """Train every domain in order; ``max_stages`` stops early (used to simulate interruption)."""
        if self.out_dir is not None:
            self.out_dir.mkdir(parents=True, exist_ok=True)
            if resume:
                self.resume()
            else:
                for stale in ("checkpoints", "metrics"):
                    shutil.rmtree(self.out_dir / stale, ignore_errors=True)
                (self.out_dir / "run_record.jsonl").write_text("", encoding="utf-8")
            (self.out_dir / "config.yaml").write_text(dump_config(self.config), encoding="utf-8")
            self.vocab.save(self.out_dir / "vocab.txt")
        budget = max_stages
        while self.position < len(self.order):
            did = self.order[self.position]
            self.guard.begin(did)
            if self.stages_done == 0:
                if budget is not None and budget <= 0:
                    return self.record
                self.model.reinit_domain(self.guard.train_identities(did), self.rng)
                self.train_stage1(did)
                self.stages_done = 1
                self._save(1)
                budget = None if budget is None else budget - 1
            if budget is not None and budget <= 0:
                return self.record
            self.train_stage2(did)
            report = self.evaluate_all()
            self.record.reports.append(report)
            self._write_report(report)
            self._save(2)
            budget = None if budget is None else budget - 1
            if self.toggles.kd:
                self.teacher = Teacher(self.model.image, self.model.head)
            log.info("domain %d done: seen %s", did, report.seen_average)
            self.position += 1
            self.stages_done = 0
        self.guard.begin(None)
        return self.record


def run_lifelong(stream: DomainStream, config: RunConfig, out_dir: str | Path | None = None, resume: bool = False) -> RunRecord:
    return LifelongTrainer(config, stream, out_dir).run(resume=resume)
