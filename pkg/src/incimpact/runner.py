"""Experiment orchestration: label, extract, select, predict, evaluate.

Stage outputs are cached under the output directory keyed by the config hash,
so a rerun reuses labeling, extraction, and selection artifacts and resumes
at the prediction stage. All artifacts are deterministic for a fixed config,
dataset, and seed when only offline providers are involved; nothing written
here contains wall-clock timestamps.
"""

from __future__ import annotations

import json
import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from datetime import time
from pathlib import Path
from typing import Dict, Iterable, List, Mapping, Optional, Sequence, Tuple

import numpy as np

from . import __version__
from .baselines import (
    combined_resample,
    knn_fit,
    knn_predict_model,
    nearest_centroid_fit,
    nearest_centroid_predict,
)
from .config import RunConfig
from .dataio import (
    SpeedDataset,
    chronological_split,
    load_glossary,
    load_incidents,
    load_speed_data,
)
from .errors import (
    EmptyLogError,
    InsufficientDataError,
    NoUpstreamCoverageError,
    PipelineError,
    ProviderError,
    StageError,
)
from .evaluation import (
    MetricReport,
    PredictionRecord,
    average_runs,
    confusion_matrix,
    emit_report,
    metric_report,
)
from .extraction import build_extraction_request, extract_features_llm, extract_features_rules
from .gateway import (
    LlmProvider,
    MockExtractionProvider,
    PromptPair,
    ProviderConfig,
    build_provider,
    predict_impact,
)
from .model import (
    FeatureVector,
    ImpactClass,
    Incident,
    IncidentFeatures,
    LabeledExample,
    TimeStep,
    TrafficFeatures,
)
from .prompts import SCAFFOLD_VERSION, render_system_prompt, render_user_prompt
from .selection import (
    CandidateResult,
    SelectionConfig,
    class_centroids,
    evaluate_candidate,
    filter_outliers,
    fit_normalizer,
    generate_candidates,
    near_boundary_subset,
    select_top_k,
    split_validation,
)
from .traffic import (
    HistoricalProfile,
    build_historical_profile,
    build_traffic_features,
    label_ground_truth,
    prediction_step_for,
    upstream_sensors,
)

log = logging.getLogger(__name__)

# Fixed sub-stream tags for deriving independent rngs from the global seed.
_STREAM_VALIDATION = 101
_STREAM_SELECTION = 202
_STREAM_RANDOM_EXAMPLES = 303

BASELINE_NEAREST_CENTROID = "nearest-centroid"
BASELINE_KNN = "knn"


@dataclass
class PreparedData:
    """Loaded, labeled, and extracted data shared by the later stages."""

    dataset: SpeedDataset
    incidents: Dict[str, Incident]
    partition: Dict[str, str]  # incident id -> "train" | "test"
    train_ids: List[str]
    test_ids: List[str]
    examples: Dict[int, Dict[str, LabeledExample]]  # horizon -> id -> example
    features: Dict[str, IncidentFeatures]
    excluded: Dict[str, int]

    def train_examples(self, horizon: int) -> List[LabeledExample]:
        return [self.examples[horizon][i] for i in self.train_ids]

    def test_examples(self, horizon: int) -> List[LabeledExample]:
        return [self.examples[horizon][i] for i in self.test_ids]


class ExperimentRunner:
    """Drives one experiment configuration end to end."""

    def __init__(self, config: RunConfig):
        self.config = config
        self.out = Path(config.paths.out)
        self.out.mkdir(parents=True, exist_ok=True)
        self._hash = config.config_hash()
        self._providers: Dict[str, LlmProvider] = {}
        self._prepared: Optional[PreparedData] = None
        self._manifest = self.out / "manifest.jsonl"

    # --- manifest -----------------------------------------------------------

    def _record(self, event: str, **payload: object) -> None:
        row = {"event": event, **payload}
        with open(self._manifest, "a", encoding="utf-8") as fh:
            fh.write(json.dumps(row, sort_keys=True) + "\n")

    # --- provider handling ----------------------------------------------------

    def provider(self, config: ProviderConfig) -> LlmProvider:
        if config.provider_name not in self._providers:
            self._providers[config.provider_name] = build_provider(
                config, thresholds=self.config.thresholds
            )
        return self._providers[config.provider_name]

    def _extractor(self) -> Optional[LlmProvider]:
        mode = self.config.extraction_mode
        if mode == "rules":
            return None
        provider_cfg = next(
            p for p in self.config.providers if p.provider_name == mode
        )
        if provider_cfg.kind == "mock":
            return MockExtractionProvider(name=provider_cfg.provider_name)
        return self.provider(provider_cfg)

    # --- leak guard -------------------------------------------------------------

    def _assert_train_only(self, ids: Iterable[str], stage: str) -> None:
        prepared = self._prepared
        assert prepared is not None
        leaked = sorted(
            i for i in ids
            if prepared.partition.get(i) != "train" and not i.startswith("synthetic:")
        )
        if leaked:
            raise StageError(f"{stage}: test-set leakage, ids {leaked[:5]} are not training data")

    # --- prepare: load, label, extract ------------------------------------------

    def prepare(self) -> PreparedData:
        if self._prepared is not None:
            return self._prepared
        cfg = self.config
        try:
            prepared = self._prepare_inner()
        except PipelineError as exc:
            if isinstance(exc, StageError):
                raise
            raise StageError(f"prepare: {exc}") from exc
        self._prepared = prepared
        self._record(
            "data_prepared",
            config_hash=self._hash,
            code_version=__version__,
            seed=cfg.seed,
            scaffold_version=SCAFFOLD_VERSION,
            usable_incidents=len(prepared.incidents),
            train=len(prepared.train_ids),
            test=len(prepared.test_ids),
            excluded=prepared.excluded,
        )
        return prepared

    def _prepare_inner(self) -> PreparedData:
        cfg = self.config
        dataset = load_speed_data(cfg.paths.speed, cfg.paths.sensors)
        incidents, dropped_milepost = load_incidents(cfg.paths.incidents)
        glossary = load_glossary(cfg.paths.glossary)
        train_inc, test_inc = chronological_split(incidents, cfg.split_fraction)
        partition = {i.id: "train" for i in train_inc}
        partition.update({i.id: "test" for i in test_inc})

        # Historical means use the training period only.
        period_end = (
            min(i.first_report_time for i in test_inc) if test_inc else dataset.end
        )
        profile = build_historical_profile(
            dataset.series.values(), (dataset.start, period_end), dataset.epoch
        )

        extractor = self._extractor()
        labels_cache = self._read_cache(self.out / "cache" / "labels.jsonl")
        features_cache = self._read_cache(self.out / "cache" / "features.jsonl")

        excluded = {"milepost": dropped_milepost, "labeling": 0, "extraction": 0}
        examples: Dict[int, Dict[str, LabeledExample]] = {h: {} for h in cfg.horizons}
        features: Dict[str, IncidentFeatures] = {}
        usable: Dict[str, Incident] = {}
        label_rows: List[dict] = []
        feature_rows: List[dict] = []

        for incident in sorted(incidents, key=lambda i: (i.first_report_time, i.id)):
            step = prediction_step_for(incident, dataset.epoch)
            try:
                cached = labels_cache.get(incident.id) if labels_cache else None
                if cached is not None:
                    traffic = TrafficFeatures(
                        pre_incident_relative_speed=cached["rho"],
                        initial_decrease_ratio=cached["delta_init"],
                    )
                    truths = {
                        int(h): ImpactClass.from_word(w) for h, w in cached["truth"].items()
                    }
                else:
                    upstream = upstream_sensors(dataset.sensors.values(), incident)
                    traffic = build_traffic_features(
                        profile, dataset.series, upstream, step
                    )
                    truths = {
                        h: label_ground_truth(
                            profile, dataset.series, upstream, step, h, cfg.thresholds
                        )
                        for h in cfg.horizons
                    }
            except (NoUpstreamCoverageError, InsufficientDataError) as exc:
                log.info("excluding %s: %s", incident.id, exc)
                excluded["labeling"] += 1
                continue

            try:
                cached = features_cache.get(incident.id) if features_cache else None
                if cached is not None:
                    incident_features = IncidentFeatures(
                        incident_time=time.fromisoformat(cached["incident_time"]),
                        num_vehicles=cached["num_vehicles"],
                        num_lanes_blocked=cached["num_lanes_blocked"],
                        extended=cached["extended"],
                    )
                else:
                    request = build_extraction_request(
                        incident, step, dataset.epoch, glossary
                    )
                    report_time = incident.first_report_time.time().replace(
                        second=0, microsecond=0
                    )
                    if extractor is None:
                        incident_features = extract_features_rules(
                            request.expanded_log_text, report_time
                        )
                    else:
                        incident_features = extract_features_llm(
                            request, extractor, report_time
                        )
            except (EmptyLogError, ProviderError) as exc:
                log.info("excluding %s: extraction failed: %s", incident.id, exc)
                excluded["extraction"] += 1
                continue

            fv = FeatureVector.combine(incident_features, traffic)
            usable[incident.id] = incident
            features[incident.id] = incident_features
            for h in cfg.horizons:
                examples[h][incident.id] = LabeledExample(
                    feature_vector=fv,
                    horizon_minutes=h,
                    truth=truths[h],
                    incident_id=incident.id,
                )
            label_rows.append(
                {
                    "id": incident.id,
                    "prediction_index": step.index,
                    "rho": traffic.pre_incident_relative_speed,
                    "delta_init": traffic.initial_decrease_ratio,
                    "truth": {str(h): truths[h].word for h in cfg.horizons},
                }
            )
            feature_rows.append(
                {
                    "id": incident.id,
                    "incident_time": incident_features.incident_time.isoformat("minutes"),
                    "num_vehicles": incident_features.num_vehicles,
                    "num_lanes_blocked": incident_features.num_lanes_blocked,
                    "extended": incident_features.extended,
                }
            )

        self._write_cache(
            self.out / "cache" / "labels.jsonl",
            {
                r["id"]: {
                    "rho": r["rho"],
                    "delta_init": r["delta_init"],
                    "truth": r["truth"],
                    "prediction_index": r["prediction_index"],
                }
                for r in label_rows
            },
        )
        self._write_cache(
            self.out / "cache" / "features.jsonl",
            {
                r["id"]: {
                    "incident_time": r["incident_time"],
                    "num_vehicles": r["num_vehicles"],
                    "num_lanes_blocked": r["num_lanes_blocked"],
                    "extended": r["extended"],
                }
                for r in feature_rows
            },
        )

        train_ids = [i.id for i in train_inc if i.id in usable]
        test_ids = [i.id for i in test_inc if i.id in usable]
        return PreparedData(
            dataset=dataset,
            incidents=usable,
            partition=partition,
            train_ids=train_ids,
            test_ids=test_ids,
            examples=examples,
            features=features,
            excluded=excluded,
        )

    # --- cache helpers -----------------------------------------------------------

    def _read_cache(self, path: Path) -> Optional[Dict[str, dict]]:
        if not path.exists():
            return None
        with open(path, encoding="utf-8") as fh:
            lines = fh.read().splitlines()
        if not lines:
            return None
        meta = json.loads(lines[0])
        if meta.get("config_hash") != self._hash:
            return None
        rows = {}
        for line in lines[1:]:
            row = json.loads(line)
            rows[row.pop("id")] = row
        return rows

    def _write_cache(self, path: Path, rows: Mapping[str, dict]) -> None:
        path.parent.mkdir(parents=True, exist_ok=True)
        with open(path, "w", encoding="utf-8") as fh:
            fh.write(json.dumps({"config_hash": self._hash}, sort_keys=True) + "\n")
            for key, row in rows.items():
                fh.write(json.dumps({"id": key, **row}, sort_keys=True) + "\n")

    # --- selection ----------------------------------------------------------------

    def _effective_validation_per_class(self, train: Sequence[LabeledExample]) -> int:
        """Shrink the stratified validation draw when a class is scarce.

        Every class must keep at least m/3 members in the example pool after
        the draw, and the draw never takes more than half a class.
        """
        cfg = self.config
        per_class = cfg.validation_per_class
        need = cfg.selection.m // 3
        for cls in ImpactClass:
            count = sum(1 for e in train if e.truth == cls)
            per_class = min(per_class, count // 2, count - need)
        return per_class

    def _selection_path(self, provider_name: str, horizon: int) -> Path:
        return self.out / "selections" / f"{provider_name}__h{horizon}.json"

    def select(self, provider_cfg: ProviderConfig, horizon: int) -> dict:
        """Produce (or reload) the selection artifact for one provider/horizon."""
        path = self._selection_path(provider_cfg.provider_name, horizon)
        if path.exists():
            artifact = json.loads(path.read_text(encoding="utf-8"))
            if artifact.get("config_hash") == self._hash:
                return artifact
        prepared = self.prepare()
        cfg = self.config
        try:
            artifact = self._select_inner(provider_cfg, horizon, prepared)
        except PipelineError as exc:
            if isinstance(exc, StageError):
                raise
            raise StageError(f"select: {exc}") from exc
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(json.dumps(artifact, indent=2, sort_keys=True) + "\n", encoding="utf-8")
        self._record(
            "selection_done",
            provider=provider_cfg.provider_name,
            horizon=horizon,
            winners=artifact["winners"],
            scores=[c["score"] for c in artifact["candidates"]],
            effective_validation_per_class=artifact["effective_validation_per_class"],
        )
        return artifact

    def _select_inner(
        self, provider_cfg: ProviderConfig, horizon: int, prepared: PreparedData
    ) -> dict:
        cfg = self.config
        train = prepared.train_examples(horizon)
        self._assert_train_only((e.incident_id for e in train), "select")
        per_class = self._effective_validation_per_class(train)
        if per_class < 1:
            raise StageError(
                f"select: not enough training data per class at horizon {horizon} "
                f"(m={cfg.selection.m}, validation_per_class={cfg.validation_per_class})"
            )
        if per_class < cfg.validation_per_class:
            log.info(
                "horizon %d: validation_per_class reduced %d -> %d for scarce classes",
                horizon, cfg.validation_per_class, per_class,
            )
        rng = np.random.default_rng([cfg.seed, _STREAM_VALIDATION, horizon])
        validation, pool = split_validation(train, per_class, rng)

        selection_seed = int(
            np.random.default_rng([cfg.seed, _STREAM_SELECTION, horizon]).integers(2**62)
        )
        sel_cfg = SelectionConfig(
            m=cfg.selection.m,
            n_candidates=cfg.selection.n_candidates,
            k_top=cfg.selection.k_top,
            near_boundary_fraction=cfg.selection.near_boundary_fraction,
            rng_seed=selection_seed,
        )
        normalizer = fit_normalizer(pool)
        centroids = class_centroids(pool, normalizer)
        non_outliers, outliers = filter_outliers(pool, centroids, normalizer)
        boundary = near_boundary_subset(
            non_outliers, centroids, normalizer, sel_cfg.near_boundary_fraction
        )
        by_class = {c: [e for e in non_outliers if e.truth == c] for c in ImpactClass}
        candidate_sets = generate_candidates(boundary, by_class, sel_cfg)

        provider = self.provider(provider_cfg)
        results = []
        for index, examples in enumerate(candidate_sets):
            score = evaluate_candidate(
                examples, validation, provider, horizon, cfg.thresholds
            )
            results.append(
                CandidateResult(
                    candidate_index=index,
                    examples=tuple(examples),
                    validation_score=score,
                )
            )
        ranked = sorted(results, key=lambda r: (-r.validation_score, r.candidate_index))
        winners = [r.candidate_index for r in ranked[: sel_cfg.k_top]]
        final = select_top_k(results, sel_cfg.k_top)
        return {
            "config_hash": self._hash,
            "provider": provider_cfg.provider_name,
            "horizon": horizon,
            "scaffold_version": SCAFFOLD_VERSION,
            "selection_seed": selection_seed,
            "effective_validation_per_class": per_class,
            "validation_ids": [e.incident_id for e in validation],
            "outlier_ids": [e.incident_id for e in outliers],
            "candidates": [
                {
                    "index": r.candidate_index,
                    "example_ids": [e.incident_id for e in r.examples],
                    "score": r.validation_score,
                }
                for r in results
            ],
            "winners": winners,
            "final_example_ids": [e.incident_id for e in final],
        }

    def _examples_from_ids(
        self, ids: Sequence[str], horizon: int
    ) -> List[LabeledExample]:
        prepared = self.prepare()
        return [prepared.examples[horizon][i] for i in ids]

    # --- prediction -----------------------------------------------------------------

    def _predictions_path(
        self, provider_name: str, horizon: int, run_index: int, variant: str = ""
    ) -> Path:
        suffix = f"__{variant}" if variant else ""
        return (
            self.out
            / "predictions"
            / f"{provider_name}__h{horizon}{suffix}__run{run_index}.jsonl"
        )

    def predict_test_set(
        self,
        provider_cfg: ProviderConfig,
        horizon: int,
        run_index: int,
        example_ids: Sequence[str],
        variant: str = "",
    ) -> List[PredictionRecord]:
        """Predict every test incident with a system prompt built from example_ids."""
        path = self._predictions_path(provider_cfg.provider_name, horizon, run_index, variant)
        prepared = self.prepare()
        tasks = prepared.test_examples(horizon)
        cached = self._read_prediction_file(path, expected=len(tasks))
        if cached is not None:
            return cached
        cfg = self.config
        try:
            provider = self.provider(provider_cfg)
            examples = self._examples_from_ids(example_ids, horizon)
            system_text = render_system_prompt(examples, horizon, cfg.thresholds)

            def run_one(item: LabeledExample) -> Tuple[Optional[ImpactClass], str]:
                user_text = render_user_prompt(item.feature_vector, horizon)
                try:
                    predicted, raw = predict_impact(
                        provider, PromptPair(system_text, user_text)
                    )
                    return predicted, raw
                except ProviderError as exc:
                    log.warning("prediction failed for %s: %s", item.incident_id, exc)
                    return None, f"<error: {exc}>"

            workers = max(1, provider_cfg.max_in_flight)
            if provider_cfg.kind == "mock" or workers == 1:
                outcomes = [run_one(item) for item in tasks]
            else:
                with ThreadPoolExecutor(max_workers=workers) as pool:
                    outcomes = list(pool.map(run_one, tasks))
        except PipelineError as exc:
            if isinstance(exc, StageError):
                raise
            raise StageError(f"predict: {exc}") from exc
        records = [
            PredictionRecord(
                model_id=provider_cfg.provider_name,
                horizon_minutes=horizon,
                run_index=run_index,
                incident_id=item.incident_id,
                truth=item.truth,
                predicted=outcome[0],
                raw_response=outcome[1],
            )
            for item, outcome in zip(tasks, outcomes)
        ]
        self._write_prediction_file(path, records)
        self._record(
            "predictions_done",
            provider=provider_cfg.provider_name,
            horizon=horizon,
            run_index=run_index,
            variant=variant or "selected",
            count=len(records),
        )
        return records

    def _read_prediction_file(
        self, path: Path, expected: int
    ) -> Optional[List[PredictionRecord]]:
        if not path.exists():
            return None
        with open(path, encoding="utf-8") as fh:
            lines = fh.read().splitlines()
        if not lines:
            return None
        meta = json.loads(lines[0])
        if meta.get("config_hash") != self._hash or len(lines) - 1 != expected:
            return None
        records = []
        for line in lines[1:]:
            row = json.loads(line)
            records.append(
                PredictionRecord(
                    model_id=row["model_id"],
                    horizon_minutes=row["horizon"],
                    run_index=row["run_index"],
                    incident_id=row["incident_id"],
                    truth=ImpactClass.from_word(row["truth"]),
                    predicted=(
                        ImpactClass.from_word(row["predicted"])
                        if row["predicted"] is not None
                        else None
                    ),
                    raw_response=row["raw_response"],
                )
            )
        return records

    def _write_prediction_file(self, path: Path, records: Sequence[PredictionRecord]) -> None:
        path.parent.mkdir(parents=True, exist_ok=True)
        with open(path, "w", encoding="utf-8") as fh:
            fh.write(json.dumps({"config_hash": self._hash}, sort_keys=True) + "\n")
            for r in records:
                row = {
                    "model_id": r.model_id,
                    "horizon": r.horizon_minutes,
                    "run_index": r.run_index,
                    "incident_id": r.incident_id,
                    "truth": r.truth.word,
                    "predicted": r.predicted.word if r.predicted is not None else None,
                    "raw_response": r.raw_response,
                }
                fh.write(json.dumps(row, sort_keys=True) + "\n")

    # --- baselines --------------------------------------------------------------------

    def baseline_records(self, horizon: int) -> List[PredictionRecord]:
        cfg = self.config
        prepared = self.prepare()
        train = prepared.train_examples(horizon)
        self._assert_train_only((e.incident_id for e in train), "baselines")
        resampled = combined_resample(train, cfg.baselines.resample)
        self._assert_train_only((e.incident_id for e in resampled), "baselines")
        centroid_model = nearest_centroid_fit(resampled)
        knn_model = knn_fit(resampled)
        k_nn = min(cfg.baselines.knn_k, len(resampled))
        records = []
        for item in prepared.test_examples(horizon):
            nc = nearest_centroid_predict(centroid_model, item.feature_vector)
            kn = knn_predict_model(knn_model, item.feature_vector, k_nn)
            for model_id, predicted in (
                (BASELINE_NEAREST_CENTROID, nc),
                (BASELINE_KNN, kn),
            ):
                records.append(
                    PredictionRecord(
                        model_id=model_id,
                        horizon_minutes=horizon,
                        run_index=0,
                        incident_id=item.incident_id,
                        truth=item.truth,
                        predicted=predicted,
                        raw_response=predicted.word,
                    )
                )
        return records

    # --- full experiment -----------------------------------------------------------------

    def run(self) -> Dict[str, object]:
        """Full pipeline for every provider and horizon; returns report paths."""
        cfg = self.config
        self.prepare()
        all_records: List[PredictionRecord] = []
        per_run_reports: List[MetricReport] = []
        for provider_cfg in cfg.providers:
            for horizon in cfg.horizons:
                artifact = self.select(provider_cfg, horizon)
                for run_index in range(cfg.runs):
                    records = self.predict_test_set(
                        provider_cfg,
                        horizon,
                        run_index,
                        artifact["final_example_ids"],
                    )
                    all_records.extend(records)
                    matrix = confusion_matrix((r.truth, r.predicted) for r in records)
                    per_run_reports.append(
                        metric_report(
                            matrix, provider_cfg.provider_name, horizon, run_index
                        )
                    )
        if cfg.baselines.enabled:
            for horizon in cfg.horizons:
                records = self.baseline_records(horizon)
                all_records.extend(records)
                for model_id in (BASELINE_NEAREST_CENTROID, BASELINE_KNN):
                    group = [r for r in records if r.model_id == model_id]
                    matrix = confusion_matrix((r.truth, r.predicted) for r in group)
                    per_run_reports.append(metric_report(matrix, model_id, horizon, 0))

        averaged = self._average(per_run_reports)
        paths = emit_report(self.out / "reports", per_run_reports, averaged, all_records)
        self._record("evaluation_done", files=sorted(str(p) for p in paths.values()))
        return {"reports": paths, "per_run": per_run_reports, "averaged": averaged}

    @staticmethod
    def _average(per_run: Sequence[MetricReport]) -> List[MetricReport]:
        groups: Dict[Tuple[str, int], List[MetricReport]] = {}
        for report in per_run:
            groups.setdefault((report.model_id, report.horizon_minutes), []).append(report)
        return [average_runs(group) for _, group in sorted(groups.items())]

    # --- k sweep -----------------------------------------------------------------------

    def sweep_k(self, k_values: Sequence[int]) -> Dict[str, object]:
        """Evaluate the final prompt at several k values (0 = no examples)."""
        cfg = self.config
        self.prepare()
        rows = []
        all_records: List[PredictionRecord] = []
        per_run_reports: List[MetricReport] = []
        for provider_cfg in cfg.providers:
            for horizon in cfg.horizons:
                artifact = self.select(provider_cfg, horizon)
                results = [
                    CandidateResult(
                        candidate_index=c["index"],
                        examples=tuple(self._examples_from_ids(c["example_ids"], horizon)),
                        validation_score=c["score"],
                    )
                    for c in artifact["candidates"]
                ]
                macro_by_count: Dict[str, float] = {}
                for k in k_values:
                    example_ids = (
                        [e.incident_id for e in select_top_k(results, k)] if k > 0 else []
                    )
                    reports = []
                    for run_index in range(cfg.runs):
                        records = self.predict_test_set(
                            provider_cfg, horizon, run_index, example_ids,
                            variant=f"k{k}",
                        )
                        all_records.extend(records)
                        matrix = confusion_matrix((r.truth, r.predicted) for r in records)
                        reports.append(
                            metric_report(
                                matrix,
                                f"{provider_cfg.provider_name}[k={k}]",
                                horizon,
                                run_index,
                            )
                        )
                    per_run_reports.extend(reports)
                    macro_by_count[str(k * cfg.selection.m)] = average_runs(reports).macro_f1
                rows.append(
                    {
                        "model_id": provider_cfg.provider_name,
                        "horizon_minutes": horizon,
                        "macro_by_count": macro_by_count,
                    }
                )
        averaged = self._average(per_run_reports)
        paths = emit_report(
            self.out / "reports", per_run_reports, averaged, all_records, sweep_rows=rows
        )
        self._record("sweep_done", k_values=list(k_values))
        return {"reports": paths, "rows": rows}

    # --- selection vs random -------------------------------------------------------------

    def compare_random(self) -> Dict[str, object]:
        """Selected examples vs the same number of uniformly random pool examples."""
        cfg = self.config
        prepared = self.prepare()
        rows = []
        all_records: List[PredictionRecord] = []
        per_run_reports: List[MetricReport] = []
        n_examples = cfg.selection.k_top * cfg.selection.m
        for provider_cfg in cfg.providers:
            for horizon in cfg.horizons:
                artifact = self.select(provider_cfg, horizon)
                train = prepared.train_examples(horizon)
                validation_ids = set(artifact["validation_ids"])
                pool = [e for e in train if e.incident_id not in validation_ids]
                if len(pool) < n_examples:
                    raise StageError(
                        f"compare-random: pool has {len(pool)} examples, need {n_examples}"
                    )
                rng = np.random.default_rng([cfg.seed, _STREAM_RANDOM_EXAMPLES, horizon])
                picks = rng.choice(len(pool), size=n_examples, replace=False)
                random_ids = [pool[i].incident_id for i in picks]

                scores = {}
                for variant, ids in (("selected", artifact["final_example_ids"]),
                                     ("random", random_ids)):
                    reports = []
                    for run_index in range(cfg.runs):
                        records = self.predict_test_set(
                            provider_cfg, horizon, run_index, ids,
                            variant=variant if variant == "random" else "",
                        )
                        all_records.extend(records)
                        matrix = confusion_matrix((r.truth, r.predicted) for r in records)
                        reports.append(
                            metric_report(
                                matrix,
                                f"{provider_cfg.provider_name}[{variant}]",
                                horizon,
                                run_index,
                            )
                        )
                    per_run_reports.extend(reports)
                    scores[variant] = average_runs(reports).macro_f1
                rows.append(
                    {
                        "model_id": provider_cfg.provider_name,
                        "horizon_minutes": horizon,
                        "macro_selected": scores["selected"],
                        "macro_random": scores["random"],
                    }
                )
        averaged = self._average(per_run_reports)
        paths = emit_report(
            self.out / "reports", per_run_reports, averaged, all_records,
            comparison_rows=rows,
        )
        self._record("comparison_done", rows=rows)
        return {"reports": paths, "rows": rows}
