"""Three-stage training: recommender warm-up, joint training with alignment,
language-model continuation; plus the ablation variants."""

from __future__ import annotations

import copy
import csv
import json
import logging
import math
from dataclasses import asdict, dataclass, field
from typing import Sequence

import numpy as np

from . import metrics
from .alignment import AlignmentConfig, LossWeights, ProjectionHeads, alignment_loss, total_loss
from .autodiff import Adam, NonFiniteError, make_rng
from .crm import CrmConfig, CrmModel, crm_loss
from .data import PreparedData, SampleArrays
from .llm import LlmConfig, LlmSurrogate, llm_loss
from .router import RouterConfig, calibrate_tau, entropy, mixup_inference

log = logging.getLogger(__name__)

STAGE1_WEIGHTS = LossWeights(0.0, 1.0, 0.0)
STAGE3_WEIGHTS = LossWeights(1.0, 0.0, 0.0)
VARIANTS = ("full", "no_s1", "no_s2", "no_s3", "no_mix")


class DivergenceError(RuntimeError):
    def __init__(self, stage: str, last_finite_step: int, cause: Exception | None = None):
        self.stage = stage
        self.last_finite_step = last_finite_step
        super().__init__(f"{stage} diverged after step {last_finite_step}: {cause}")


@dataclass
class Stage1Plan:
    epochs: int = 10
    batch_size: int = 256
    lr: float = 1e-3
    weight_decay: float = 0.0


@dataclass
class Stage2Plan:
    subset_count: int | None = 25_000
    subset_fraction: float | None = None
    subset_cap_fraction: float = 0.05
    epochs: int = 10
    batch_size: int = 32
    weights: tuple[float, float, float] = (1.0, 1.0, 0.1)
    patience: int = 3
    lr_crm: float = 1e-4
    lr_llm: float = 1e-3
    lr_heads: float = 1e-3
    weight_decay: float = 0.0


@dataclass
class Stage3Plan:
    subset_count: int | None = 25_000
    subset_fraction: float | None = None
    subset_cap_fraction: float = 0.05
    epochs: int = 10
    batch_size: int = 32
    lr_llm: float = 1e-3
    weight_decay: float = 0.0


@dataclass
class TrainingPlan:
    seed: int = 42
    stage1: Stage1Plan = field(default_factory=Stage1Plan)
    stage2: Stage2Plan = field(default_factory=Stage2Plan)
    stage3: Stage3Plan = field(default_factory=Stage3Plan)
    subset2_ids: list[int] | None = None
    subset3_ids: list[int] | None = None

    @property
    def stage2_weights(self) -> LossWeights:
        return LossWeights(*self.stage2.weights)

    def validate(self):
        w = self.stage2_weights
        if not (w.alpha > 0 and w.beta > 0 and w.gamma > 0):
            raise ValueError("stage 2 needs all three loss weights positive")
        if self.stage2.patience < 1:
            raise ValueError("stage 2 patience must be >= 1")
        for st in (self.stage1, self.stage2, self.stage3):
            if st.epochs < 0 or st.batch_size < 1:
                raise ValueError("epochs must be >= 0 and batch_size >= 1")
        return self


def subset_size(n_train: int, count: int | None, fraction: float | None, cap: float) -> int:
    if fraction is not None:
        if not 0.0 < fraction <= 1.0:
            raise ValueError(f"subset fraction {fraction} outside (0, 1]")
        return max(1, round(fraction * n_train))
    if count is None or count < 1:
        raise ValueError("subset needs a positive count or a fraction")
    return max(1, min(count, math.floor(cap * n_train)))


def resolve_subsets(plan: TrainingPlan, train_ids: Sequence[int]) -> TrainingPlan:
    """Draw the disjoint stage-2 and stage-3 subsets; a pure function of (seed, ids)."""
    ids = np.asarray(train_ids, dtype=np.int64)
    n = len(ids)
    n2 = subset_size(n, plan.stage2.subset_count, plan.stage2.subset_fraction,
                     plan.stage2.subset_cap_fraction)
    n3 = subset_size(n, plan.stage3.subset_count, plan.stage3.subset_fraction,
                     plan.stage3.subset_cap_fraction)
    if n2 + n3 > n:
        raise ValueError(f"subsets of {n2} + {n3} exceed the {n} training samples")
    perm = make_rng(plan.seed, "subsets").permutation(n)
    plan.subset2_ids = sorted(int(i) for i in ids[perm[:n2]])
    plan.subset3_ids = sorted(int(i) for i in ids[perm[n2:n2 + n3]])
    return plan


class RunLog:
    """Per-step loss records, optionally mirrored to a JSON-lines file."""

    def __init__(self, path=None):
        self.records: list[dict] = []
        self._fh = open(path, "w") if path else None

    def write(self, **rec):
        rec = {k: (float(v) if isinstance(v, (np.floating, float)) else v) for k, v in rec.items()}
        self.records.append(rec)
        if self._fh:
            self._fh.write(json.dumps(rec, sort_keys=True) + "\n")

    def close(self):
        if self._fh:
            self._fh.close()
            self._fh = None

    def stage(self, name: str) -> list[dict]:
        return [r for r in self.records if r["stage"] == name]


def _index_of(arrays: SampleArrays, ids: Sequence[int]) -> np.ndarray:
    pos = {int(s): i for i, s in enumerate(arrays.sample_ids)}
    return np.array([pos[int(i)] for i in ids], dtype=np.int64)


def crm_val_auc(crm: CrmModel, valid: SampleArrays) -> float:
    a = metrics.auc(valid.labels, crm.predict(valid.ids))
    return float("nan") if a is None else a


def _guard(stage: str, step: int):
    class _Ctx:
        def __enter__(self):
            return self

        def __exit__(self, et, ev, tb):
            if et is not None and issubclass(et, (NonFiniteError, FloatingPointError)):
                raise DivergenceError(stage, step, ev) from ev
            return False
    return _Ctx()


def stage1_warmup(crm: CrmModel, train: SampleArrays, valid: SampleArrays,
                  plan: TrainingPlan, runlog: RunLog | None = None) -> CrmModel:
    """Train the recommender alone on the full training split; keep the best-AUC weights."""
    p = plan.stage1
    if p.epochs == 0:
        return crm
    runlog = runlog or RunLog()
    opt = Adam(crm.params, lr=p.lr, weight_decay=p.weight_decay)
    rng = make_rng(plan.seed, "stage1")
    best_auc, best_state = -math.inf, crm.state()
    step = 0
    for epoch in range(p.epochs):
        for batch in train.batches(p.batch_size, rng):
            with _guard("stage1", step):
                opt.zero_grad()
                prob, _ = crm.forward(batch.ids)
                bd = total_loss(None, crm_loss(prob, batch.labels), None, STAGE1_WEIGHTS)
                bd.node.backward()
                opt.step()
            step += 1
            runlog.write(stage="stage1", step=step, l_llm=bd.l_llm, l_crm=bd.l_crm,
                         l_cal=bd.l_cal, total=bd.total)
        auc = crm_val_auc(crm, valid)
        runlog.records[-1]["val_auc"] = auc
        log.info("stage1 epoch %d val_auc %.4f", epoch + 1, auc)
        if auc > best_auc:
            best_auc, best_state = auc, crm.state()
    crm.load_state(best_state)
    return crm


@dataclass
class Stage2Outcome:
    best_val_auc: float
    final_val_auc: float
    val_history: list[float]
    stopped_early: bool


def stage2_joint(crm: CrmModel, llm: LlmSurrogate, heads: ProjectionHeads,
                 train: SampleArrays, valid: SampleArrays, plan: TrainingPlan,
                 align: AlignmentConfig, runlog: RunLog | None = None) -> Stage2Outcome:
    """Joint optimisation of both models and the projection heads on subset 2.

    The recommender is checked on validation after every epoch; its best
    snapshot (the pre-stage weights included) is restored at the end, while the
    language model keeps its latest weights.
    """
    p = plan.stage2
    if not plan.subset2_ids:
        raise ValueError("stage 2 subset is empty; call resolve_subsets first")
    runlog = runlog or RunLog()
    weights = plan.stage2_weights
    subset = train.take(_index_of(train, plan.subset2_ids))
    opts = [Adam(crm.params, lr=p.lr_crm, weight_decay=p.weight_decay),
            Adam(llm.params, lr=p.lr_llm, weight_decay=p.weight_decay),
            Adam(heads.params, lr=p.lr_heads, weight_decay=p.weight_decay)]
    rng = make_rng(plan.seed, "stage2")
    best_auc = crm_val_auc(crm, valid)
    best_state = crm.state()
    history = [best_auc]
    bad_checks, step, stopped = 0, 0, False
    for epoch in range(p.epochs):
        for batch in subset.batches(p.batch_size, rng):
            with _guard("stage2", step):
                for o in opts:
                    o.zero_grad()
                prob, crm_h = crm.forward(batch.ids)
                logits, llm_h = llm.forward(batch.tokens, batch.lengths)
                l_cal = alignment_loss([llm_h[i - 1] for i in align.llm_layers],
                                       [crm_h[i - 1] for i in align.crm_layers],
                                       heads, align.exponent, reduction="mean")
                bd = total_loss(llm_loss(logits, batch.label_tokens),
                                crm_loss(prob, batch.labels), l_cal, weights)
                bd.node.backward()
                for o in opts:
                    o.step()
            step += 1
            runlog.write(stage="stage2", step=step, l_llm=bd.l_llm, l_crm=bd.l_crm,
                         l_cal=bd.l_cal, total=bd.total)
        auc = crm_val_auc(crm, valid)
        history.append(auc)
        runlog.records[-1]["val_auc"] = auc
        log.info("stage2 epoch %d crm val_auc %.4f", epoch + 1, auc)
        if auc > best_auc:
            best_auc, best_state, bad_checks = auc, crm.state(), 0
        else:
            bad_checks += 1
            if bad_checks >= p.patience:
                stopped = True
                break
    final_auc = history[-1]
    crm.load_state(best_state)
    return Stage2Outcome(best_auc, final_auc, history, stopped)


def stage3_llm_continue(llm: LlmSurrogate, train: SampleArrays, plan: TrainingPlan,
                        runlog: RunLog | None = None, frozen: Sequence = ()) -> LlmSurrogate:
    """Language-model-only training on subset 3. ``frozen`` modules are checked
    to be bit-identical afterwards."""
    p = plan.stage3
    if plan.subset3_ids is None:
        raise ValueError("stage 3 subset unresolved; call resolve_subsets first")
    if plan.subset2_ids and set(plan.subset2_ids) & set(plan.subset3_ids):
        raise ValueError("stage 2 and stage 3 subsets overlap")
    before = [m.digest() for m in frozen]
    runlog = runlog or RunLog()
    if p.epochs and plan.subset3_ids:
        subset = train.take(_index_of(train, plan.subset3_ids))
        opt = Adam(llm.params, lr=p.lr_llm, weight_decay=p.weight_decay)
        rng = make_rng(plan.seed, "stage3")
        step = 0
        for _ in range(p.epochs):
            for batch in subset.batches(p.batch_size, rng):
                with _guard("stage3", step):
                    opt.zero_grad()
                    logits, _ = llm.forward(batch.tokens, batch.lengths)
                    bd = total_loss(llm_loss(logits, batch.label_tokens), None, None,
                                    STAGE3_WEIGHTS)
                    bd.node.backward()
                    opt.step()
                step += 1
                runlog.write(stage="stage3", step=step, l_llm=bd.l_llm, l_crm=bd.l_crm,
                             l_cal=bd.l_cal, total=bd.total)
    if [m.digest() for m in frozen] != before:
        raise RuntimeError("stage 3 modified frozen parameters")
    return llm


# --- end-to-end -----------------------------------------------------------------

@dataclass
class ModelConfig:
    crm: CrmConfig = field(default_factory=CrmConfig)
    llm: LlmConfig = field(default_factory=LlmConfig)
    align: AlignmentConfig = field(default_factory=AlignmentConfig)


@dataclass
class Encoded:
    train: SampleArrays
    valid: SampleArrays
    test: SampleArrays

    @classmethod
    def from_prepared(cls, data: PreparedData) -> "Encoded":
        pad = data.tokenizer.pad_id
        return cls(*(SampleArrays.from_samples(s, pad) for s in (data.train, data.valid, data.test)))


def build_models(data: PreparedData, models: ModelConfig, seed: int):
    crm = CrmModel(data.vocab.fields, data.vocab.cardinalities(), models.crm,
                   make_rng(seed, "init", "crm"))
    tok = data.tokenizer
    llm_cfg = copy.copy(models.llm)
    llm_cfg.max_len = max(llm_cfg.max_len, tok.max_sequence_length)
    llm = LlmSurrogate(len(tok), tok.yes_id, tok.no_id, llm_cfg, make_rng(seed, "init", "llm"))
    heads = ProjectionHeads(llm_cfg.d_model, crm.dim, models.align.pairs,
                            models.align.projection_dim, make_rng(seed, "init", "heads"))
    return crm, llm, heads


@dataclass
class PipelineResult:
    crm_stage1: CrmModel | None
    crm: CrmModel
    llm: LlmSurrogate
    heads: ProjectionHeads
    plan: TrainingPlan
    runlog: RunLog
    stage2: Stage2Outcome | None = None


def train_pipeline(data: PreparedData, enc: Encoded, models: ModelConfig, plan: TrainingPlan,
                   runlog: RunLog | None = None) -> PipelineResult:
    """The full protocol: warm-up, joint training, continuation."""
    plan.validate()
    runlog = runlog or RunLog()
    if plan.subset2_ids is None or plan.subset3_ids is None:
        resolve_subsets(plan, enc.train.sample_ids)
    crm, llm, heads = build_models(data, models, plan.seed)
    stage1_warmup(crm, enc.train, enc.valid, plan, runlog)
    crm_stage1 = copy.deepcopy(crm)
    outcome = stage2_joint(crm, llm, heads, enc.train, enc.valid, plan, models.align, runlog)
    stage3_llm_continue(llm, enc.train, plan, runlog, frozen=(crm, heads))
    return PipelineResult(crm_stage1, crm, llm, heads, plan, runlog, outcome)


def resolve_router(router: RouterConfig, crm: CrmModel, valid: SampleArrays) -> RouterConfig:
    if router.mode == "absolute" and router.tau is None:
        tau = calibrate_tau(entropy(crm.predict(valid.ids)), router.rho)
        router = RouterConfig("absolute", router.rho, tau)
    return router.validate()


@dataclass
class AblationRow:
    variant: str
    auc: float | None
    logloss: float
    acc: float


@dataclass
class AblationResult:
    rows: list[AblationRow]
    details: dict = field(default_factory=dict)

    def row(self, variant: str) -> AblationRow:
        return next(r for r in self.rows if r.variant == variant)


def _mixup_row(variant, crm, llm, enc, router) -> tuple[AblationRow, object]:
    res = mixup_inference(crm, llm, enc.test, resolve_router(router, crm, enc.valid))
    r = metrics.evaluate(enc.test.labels, res.y_final)
    return AblationRow(variant, r.auc, r.logloss, r.acc), res


def run_ablation(data: PreparedData, enc: Encoded, models: ModelConfig, plan: TrainingPlan,
                 router: RouterConfig, variants: Sequence[str] = VARIANTS,
                 runlog: RunLog | None = None) -> AblationResult:
    """Evaluate the requested variants on the test split.

    Stages shared between variants are trained once; every stage draws from
    its own seeded stream, so sharing does not change any result.
    """
    for v in variants:
        if v not in VARIANTS:
            raise ValueError(f"unknown variant {v!r}")
    plan.validate()
    runlog = runlog or RunLog()
    if plan.subset2_ids is None or plan.subset3_ids is None:
        resolve_subsets(plan, enc.train.sample_ids)
    wanted = set(variants)
    rows: dict[str, AblationRow] = {}
    details: dict = {}

    crm0, llm0, heads0 = build_models(data, models, plan.seed)
    if wanted & {"full", "no_s2", "no_s3", "no_mix"}:
        crm1 = stage1_warmup(copy.deepcopy(crm0), enc.train, enc.valid, plan,
                             _tagged(runlog, "full"))
        details["crm_stage1"] = crm1
    if wanted & {"full", "no_s3", "no_mix"}:
        crm2, llm2, heads2 = copy.deepcopy(crm1), copy.deepcopy(llm0), copy.deepcopy(heads0)
        details["stage2"] = stage2_joint(crm2, llm2, heads2, enc.train, enc.valid, plan,
                                         models.align, _tagged(runlog, "full"))
        details["crm_best"] = crm2
        details["llm_stage2"] = copy.deepcopy(llm2)
        if "no_mix" in wanted:
            p = crm2.predict(enc.test.ids)
            r = metrics.evaluate(enc.test.labels, p)
            rows["no_mix"] = AblationRow("no_mix", r.auc, r.logloss, r.acc)
        if "no_s3" in wanted:
            rows["no_s3"], _ = _mixup_row("no_s3", crm2, llm2, enc, router)
        if "full" in wanted:
            llm3 = stage3_llm_continue(copy.deepcopy(llm2), enc.train, plan,
                                       _tagged(runlog, "full"), frozen=(crm2, heads2))
            rows["full"], details["full_mixup"] = _mixup_row("full", crm2, llm3, enc, router)
            details["llm_final"] = llm3
            details["heads"] = heads2
    if "no_s2" in wanted:
        llm_ind = stage3_llm_continue(copy.deepcopy(llm0), enc.train, plan,
                                      _tagged(runlog, "no_s2"), frozen=(crm1,))
        rows["no_s2"], _ = _mixup_row("no_s2", crm1, llm_ind, enc, router)
    if "no_s1" in wanted:
        crm_f, llm_f, heads_f = copy.deepcopy(crm0), copy.deepcopy(llm0), copy.deepcopy(heads0)
        stage2_joint(crm_f, llm_f, heads_f, enc.train, enc.valid, plan, models.align,
                     _tagged(runlog, "no_s1"))
        stage3_llm_continue(llm_f, enc.train, plan, _tagged(runlog, "no_s1"),
                            frozen=(crm_f, heads_f))
        rows["no_s1"], _ = _mixup_row("no_s1", crm_f, llm_f, enc, router)
    return AblationResult([rows[v] for v in variants], details)


class _TaggedLog(RunLog):
    def __init__(self, parent: RunLog, variant: str):
        self.parent, self.variant = parent, variant

    @property
    def records(self):
        return self.parent.records

    def write(self, **rec):
        self.parent.write(variant=self.variant, **rec)


def _tagged(runlog: RunLog, variant: str) -> RunLog:
    return _TaggedLog(runlog, variant)


REPORT_COLUMNS = ("variant", "auc", "logloss", "acc")


def _fmt(x) -> str:
    return "undefined" if x is None else f"{x:.6f}"


def write_ablation_report(result: AblationResult, csv_path, json_path=None, dataset: str = ""):
    with open(csv_path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(("dataset",) + REPORT_COLUMNS)
        for r in result.rows:
            w.writerow((dataset, r.variant, _fmt(r.auc), _fmt(r.logloss), _fmt(r.acc)))
    if json_path is not None:
        with open(json_path, "w") as fh:
            json.dump({"dataset": dataset, "rows": [asdict(r) for r in result.rows]}, fh,
                      indent=2, sort_keys=True)
