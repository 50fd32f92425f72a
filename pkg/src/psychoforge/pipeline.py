"""Study orchestration: configuration, run directories, manifests and reports.

Each command writes into ``<out_dir>/<study>/`` and finishes by writing a
``manifest.json`` that echoes the configuration and lists the sha256 of every
input and output file. ``cmd_report`` verifies those hashes before rendering.
"""

from __future__ import annotations

import csv
import hashlib
import json
import logging
import math
from dataclasses import asdict, dataclass, field, fields
from datetime import datetime, timezone
from pathlib import Path
from typing import Any, Mapping, Sequence

import numpy as np

from . import __version__
from . import agents, persona, psychometrics, scales, semantic, simulate
from .scales import DOMAINS, DOMAIN_NAMES

log = logging.getLogger(__name__)

STUDIES = ("study1", "simulate", "study2", "study3", "study4")
FORMATS = ("Likert", "Expanded", "both")
BACKENDS = ("mock", "remote")
MANIFEST = "manifest.json"
REFERENCE_LABEL_KEY = "label"


class PipelineError(RuntimeError):
    pass


class ReportError(PipelineError):
    pass


@dataclass
class RunConfig:
    study: str = "study3"
    backend: str = "mock"
    format: str = "both"
    n_agents: int = 200
    seed: int = 0
    out_dir: str = "runs"
    offline: bool = False
    input_matrix: str | None = None
    params: str | None = None
    noise_sd: float = 0.0
    concurrency: int = 8
    model: str = agents.DEFAULT_MODEL
    temperature: float = agents.DEFAULT_TEMPERATURE
    max_retries: int = 3
    crosswalk: str | None = None
    expansion_table: str | None = None
    embedding_model: str = semantic.LOCAL_MODEL
    embedding_cache: str | None = None
    similarity_method: str = "pairwise"
    tsne_iterations: int = 1000
    tsne_perplexity: float | None = None
    drop: str = "last"
    per_scenario: bool = False
    standardize: bool = False

    def validate(self) -> None:
        if self.study not in STUDIES:
            raise PipelineError(f"unknown study {self.study!r}; choose from {', '.join(STUDIES)}")
        if self.backend not in BACKENDS:
            raise PipelineError(f"unknown backend {self.backend!r}")
        if self.format not in FORMATS:
            raise PipelineError(f"unknown format {self.format!r}")
        if self.study != "study1" and self.n_agents < 1:
            raise PipelineError("n_agents must be at least 1")
        if self.drop not in ("first", "last"):
            raise PipelineError("drop must be 'first' or 'last'")
        if self.noise_sd < 0:
            raise PipelineError("noise_sd must be non-negative")
        if self.backend == "remote" and self.study in ("study2", "study3", "study4"):
            import os

            if not os.environ.get(agents.ENV_KEY):
                raise agents.ConfigurationError(f"remote backend requires {agents.ENV_KEY} in the environment")

    @property
    def formats(self) -> list[persona.PromptFormat]:
        if self.format == "both":
            return [persona.PromptFormat.LIKERT, persona.PromptFormat.EXPANDED]
        return [persona.PromptFormat(self.format)]

    @classmethod
    def load(cls, path: str | Path | None = None, **overrides) -> "RunConfig":
        """Config file values, then non-None overrides (flags win)."""
        values: dict[str, Any] = {}
        if path:
            try:
                values.update(json.loads(Path(path).read_text(encoding="utf-8")))
            except json.JSONDecodeError as exc:
                raise PipelineError(f"{path}: invalid JSON config ({exc})") from None
        known = {f.name for f in fields(cls)}
        unknown = sorted(set(values) - known)
        if unknown:
            raise PipelineError(f"unknown config key {unknown[0]!r}")
        values.update({k: v for k, v in overrides.items() if v is not None})
        cfg = cls(**values)
        cfg.validate()
        return cfg


# -- files and hashing --------------------------------------------------------------

def sha256_file(path: str | Path) -> str:
    h = hashlib.sha256()
    with Path(path).open("rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 16), b""):
            h.update(chunk)
    return h.hexdigest()


def fmt(x: float, digits: int = 6) -> str:
    if x is None or (isinstance(x, float) and math.isnan(x)):
        return "NA"
    return f"{x:.{digits}f}"


def write_csv(path: Path, header: Sequence[str], rows: Sequence[Sequence[Any]]) -> None:
    with path.open("w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        w.writerows(rows)


def read_csv(path: Path) -> list[dict[str, str]]:
    with path.open(newline="", encoding="utf-8") as fh:
        return list(csv.DictReader(fh))


@dataclass
class RunManifest:
    study: str
    config: dict
    toolkit_version: str
    started_at: str
    finished_at: str = ""
    inputs: dict[str, str] = field(default_factory=dict)
    outputs: dict[str, dict] = field(default_factory=dict)
    failures: dict[str, dict[str, str]] = field(default_factory=dict)

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def read(cls, path: str | Path) -> "RunManifest":
        try:
            doc = json.loads(Path(path).read_text(encoding="utf-8"))
            return cls(**doc)
        except (json.JSONDecodeError, TypeError) as exc:
            raise ReportError(f"{path}: corrupt manifest ({exc})") from None


class RunDir:
    """Collects outputs of one study and writes the manifest exactly once."""

    def __init__(self, cfg: RunConfig, study: str):
        self.path = Path(cfg.out_dir) / study
        self.path.mkdir(parents=True, exist_ok=True)
        self.manifest = RunManifest(study, asdict(cfg), __version__, _now())
        self._written: dict[str, bool] = {}
        self._closed = False

    def file(self, name: str, deterministic: bool = True) -> Path:
        """Path of an output; only files requested here enter the manifest."""
        self._written[name] = deterministic
        p = self.path / name
        p.unlink(missing_ok=True)
        return p

    def add_input(self, label: str, path: str | Path) -> None:
        self.manifest.inputs[label] = sha256_file(path)

    def finish(self) -> RunManifest:
        if self._closed:
            raise PipelineError("manifest already written")
        outputs = {}
        for rel, deterministic in sorted(self._written.items()):
            p = self.path / rel
            if not p.exists():
                raise PipelineError(f"declared output {rel} was never written")
            outputs[rel] = {"sha256": sha256_file(p), "bytes": p.stat().st_size, "deterministic": deterministic}
        self.manifest.outputs = outputs
        self.manifest.finished_at = _now()
        (self.path / MANIFEST).write_text(json.dumps(self.manifest.to_dict(), indent=2, sort_keys=True) + "\n", encoding="utf-8")
        self._closed = True
        return self.manifest


def _now() -> str:
    return datetime.now(timezone.utc).isoformat(timespec="seconds")


def _bundled_inputs(run: RunDir, names: Sequence[str]) -> None:
    for n in names:
        run.add_input(f"package:data/{n}", scales.data_path(n))


# -- shared pieces ---------------------------------------------------------------------

@dataclass
class Personas:
    agent_ids: list[str]
    responses: list[scales.ResponseVector]
    source: str


def load_personas(cfg: RunConfig, run: RunDir, bfi2: scales.ScaleDefinition) -> Personas:
    """BFI2 personas from an input matrix, or simulated from parameters."""
    if cfg.input_matrix:
        ids, rows = scales.read_response_matrix(cfg.input_matrix, bfi2)
        run.add_input("input_matrix", cfg.input_matrix)
        if not rows:
            raise PipelineError(f"{cfg.input_matrix}: no respondents")
        return Personas(ids, rows, "matrix")
    path = cfg.params or scales.data_path("sim_params_demo.json")
    run.add_input("params" if cfg.params else "package:data/sim_params_demo.json", path)
    params = simulate.load_params(path, n_agents=cfg.n_agents, seed=agents.derive_seed(cfg.seed, "simulate") % 2**32)
    ds = simulate.simulate_bfi2(params, bfi2)
    return Personas(ds.agent_ids, ds.responses, "simulated")


def make_backend(cfg: RunConfig, bfi2, mm, table, batteries):
    if cfg.backend == "remote":
        return agents.RemoteBackend.from_env()
    crosswalk = agents.load_crosswalk(cfg.crosswalk)
    crosswalk.validate(bfi2, mm)
    return agents.MockBackend(bfi2, mm, table, crosswalk, batteries, cfg.noise_sd, agents.derive_seed(cfg.seed, "mock"))


def _specs(cfg: RunConfig, ids: Sequence[str], prompts: Sequence[str]) -> list[agents.AgentSpec]:
    return [agents.AgentSpec(a, p, cfg.model, cfg.temperature, cfg.max_retries) for a, p in zip(ids, prompts)]


# -- study 1 --------------------------------------------------------------------------------

def cmd_study1(cfg: RunConfig) -> RunManifest:
    run = RunDir(cfg, "study1")
    if cfg.embedding_cache:
        cache_path = Path(cfg.embedding_cache)
    elif cfg.embedding_model == semantic.LOCAL_MODEL:
        cache_path = scales.data_path(semantic.FIXTURE_CACHE)
    else:
        cache_path = run.path / "embeddings_cache.jsonl"
    cache = semantic.EmbeddingCache(cache_path)
    if cache_path.exists():
        run.add_input("embedding_cache", cache_path)

    tests, labels, item_ids, vectors = [], [], [], []
    for key in semantic.STUDY1_SCALES:
        scale = scales.bundled_scale(key)
        _bundled_inputs(run, [scales.BUNDLED[key]])
        recs = semantic.embed_texts([it.text for it in scale.items], cfg.embedding_model, cache, cfg.offline)
        tests.append(semantic.embed_scale(scale, recs))
        for it, r in zip(scale.items, recs):
            labels.append((scale.name, it.domain))
            item_ids.append(it.id)
            vectors.append(r.vector.astype(float))

    panels = semantic.similarity_panels(tests, cfg.similarity_method)
    names = panels.tests
    for key, m in panels.panels.items():
        write_csv(run.file(f"similarity_{key}.csv"), ["test"] + names, [[n] + [fmt(v) for v in row] for n, row in zip(names, m)])
    means = {k: panels.mean_cross_similarity(k) for k in ("overall",) + DOMAINS}
    write_csv(
        run.file("mean_similarity.csv"),
        ["test", "overall"] + list(DOMAINS),
        [[n] + [fmt(means[k][n]) for k in ("overall",) + DOMAINS] for n in names],
    )

    tcfg = semantic.TsneConfig(perplexity=cfg.tsne_perplexity, iterations=cfg.tsne_iterations, seed=cfg.seed)
    res = semantic.tsne_fit(np.stack(vectors), tcfg, labels)
    write_csv(
        run.file("tsne_points.csv"),
        ["item_id", "test", "domain", "x", "y"],
        [[i, t, d, fmt(x), fmt(y)] for i, (t, d), (x, y) in zip(item_ids, labels, res.points)],
    )
    write_csv(run.file("tsne_kl.csv"), ["iteration", "kl"], [[k + 1, fmt(v, 8)] for k, v in enumerate(res.kl_trace)])
    sil = semantic.silhouette(res.points, [d for _, d in labels])
    write_csv(
        run.file("tsne_summary.csv"),
        ["n_points", "perplexity", "iterations", "kl_exaggeration_end", "kl_final", "silhouette_domain"],
        [[len(vectors), fmt(tcfg.resolved_perplexity(len(vectors))), tcfg.iterations,
          fmt(res.kl_trace[res.exaggeration_end - 1], 8), fmt(res.kl_trace[-1], 8), fmt(sil)]],
    )
    return run.finish()


# -- simulate --------------------------------------------------------------------------------

def cmd_simulate(cfg: RunConfig) -> RunManifest:
    run = RunDir(cfg, "simulate")
    bfi2 = scales.bundled_scale("bfi2")
    _bundled_inputs(run, ["bfi2.json"])
    path = cfg.params or scales.data_path("sim_params_demo.json")
    run.add_input("params", path)
    params = simulate.load_params(path, n_agents=cfg.n_agents, seed=cfg.seed)
    ds = simulate.simulate_bfi2(params, bfi2)
    scales.write_response_matrix(run.file("bfi2_responses.csv"), ds.responses, bfi2, ds.agent_ids)
    write_csv(
        run.file("latent_facets.csv"),
        ["agent_id"] + list(params.facets),
        [[a] + [fmt(v) for v in row] for a, row in zip(ds.agent_ids, ds.latent_facets)],
    )
    simulate.write_provenance(run.file("provenance.json"), params, __version__)
    return run.finish()


# -- studies 2 and 3 ----------------------------------------------------------------------

@dataclass
class FormatResult:
    format: str
    convergent: psychometrics.ConvergentTable
    domain_fits: dict[str, psychometrics.DomainFit]
    n_agents: int


def _answers_to_ids(parsed: agents.ParsedAnswers, scale: scales.ScaleDefinition) -> scales.ResponseVector:
    return scales.ResponseVector(scale.name, {it.id: parsed.answers[it.text] for it in scale.items})


def cmd_study23(cfg: RunConfig) -> RunManifest:
    study = "study2" if cfg.input_matrix else "study3"
    run = RunDir(cfg, study)
    bfi2, mm = scales.bundled_scale("bfi2"), scales.bundled_scale("mini_markers")
    table = persona.load_expansion_table(cfg.expansion_table)
    batteries = persona.load_scenarios()
    _bundled_inputs(run, ["bfi2.json", "mini_markers.json", "templates/likert.txt", "templates/expanded.txt", "templates/questionnaire.txt"])
    run.add_input("expansion_table", cfg.expansion_table or scales.data_path("expansion_bfi2.json"))
    if cfg.backend == "mock":
        run.add_input("crosswalk", cfg.crosswalk or scales.data_path("crosswalk.json"))

    people = load_personas(cfg, run, bfi2)
    scales.write_response_matrix(run.file("bfi2_inputs.csv"), people.responses, bfi2, people.agent_ids)
    inputs = {a: scales.score(rv, bfi2).domain_scores for a, rv in zip(people.agent_ids, people.responses)}
    backend = make_backend(cfg, bfi2, mm, table, batteries)
    schema = agents.AnswerSchema.for_scale(mm)

    results: list[FormatResult] = []
    for f in cfg.formats:
        prompts = [
            persona.render_persona_prompt(persona.PersonaProfile(a, rv, f), table, bfi2, mm)
            for a, rv in zip(people.agent_ids, people.responses)
        ]
        transcript = agents.TranscriptStore(run.file(f"transcripts_{f.value}.jsonl", deterministic=False))
        batch = agents.run_batch(_specs(cfg, people.agent_ids, prompts), backend, schema, cfg.concurrency, transcript)
        if batch.failures:
            run.manifest.failures[f.value] = dict(batch.failures)
        ok = [(a, _answers_to_ids(p, mm)) for a, p in batch.succeeded]
        scales.write_response_matrix(run.file(f"mini_markers_{f.value}.csv"), [rv for _, rv in ok], mm, [a for a, _ in ok])
        outputs = {a: scales.score(rv, mm).domain_scores for a, rv in ok}
        conv = psychometrics.convergent_table({a: inputs[a] for a in outputs}, outputs)
        data = np.array([rv.as_list(mm) for _, rv in ok], dtype=float)
        fits = {}
        for d in DOMAINS:
            idx = [k for k, it in enumerate(mm.items) if it.domain == d]
            fits[d] = psychometrics.fit_domain(
                data[:, idx], [mm.items[k].id for k in idx], [mm.items[k].reversed for k in idx],
                (mm.response_min, mm.response_max), d, cfg.drop,
            )
        results.append(FormatResult(f.value, conv, fits, len(ok)))

    write_csv(
        run.file("convergent.csv"),
        ["format", "n"] + list(DOMAINS) + ["average"],
        [[r.format, r.n_agents] + [fmt(r.convergent.correlations[d]) for d in DOMAINS] + [fmt(r.convergent.average)] for r in results],
    )
    rows = []
    for r in results:
        for d, fit in r.domain_fits.items():
            for item in fit.initial.items:
                final = fit.final
                dropped = item in fit.dropped
                rows.append([
                    r.format, d, item,
                    "NA" if dropped else fmt(final.loadings[item]),
                    "NA" if dropped else fmt(final.uniquenesses[item]),
                    int(item in final.heywood_flags), int(dropped),
                ])
    write_csv(run.file("cfa_loadings.csv"), ["format", "domain", "item", "loading", "uniqueness", "heywood", "dropped"], rows)
    write_csv(
        run.file("reliability.csv"),
        ["format", "domain", "alpha", "k_items", "dropped_items", "initial_converged", "final_converged", "diagnosis"],
        [
            [r.format, d, fmt(fit.alpha.alpha), fit.alpha.k_items, ";".join(fit.dropped),
             int(fit.initial.converged), int(fit.final.converged),
             " / ".join(x for x in (fit.initial.diagnosis, fit.final.diagnosis if fit.final is not fit.initial else "") if x)]
            for r in results for d, fit in r.domain_fits.items()
        ],
    )
    return run.finish()


# -- study 4 ----------------------------------------------------------------------------------

def cmd_study4(cfg: RunConfig) -> RunManifest:
    run = RunDir(cfg, "study4")
    bfi2, mm = scales.bundled_scale("bfi2"), scales.bundled_scale("mini_markers")
    table = persona.load_expansion_table(cfg.expansion_table)
    batteries = persona.load_scenarios()
    _bundled_inputs(run, ["bfi2.json", "scenarios.json", "templates/scenarios_risk.txt", "templates/scenarios_ethics.txt"])
    run.add_input("expansion_table", cfg.expansion_table or scales.data_path("expansion_bfi2.json"))
    if cfg.backend == "mock":
        run.add_input("crosswalk", cfg.crosswalk or scales.data_path("crosswalk.json"))

    people = load_personas(cfg, run, bfi2)
    domain_scores = {a: scales.score(rv, bfi2).domain_scores for a, rv in zip(people.agent_ids, people.responses)}
    backend = make_backend(cfg, bfi2, mm, table, batteries)

    raw: dict[str, dict[str, dict[str, int]]] = {}
    for battery, scs in batteries.items():
        prompts = [persona.render_scenarios(persona.PersonaProfile(a, rv), battery, table, batteries, bfi2)
                   for a, rv in zip(people.agent_ids, people.responses)]
        transcript = agents.TranscriptStore(run.file(f"transcripts_{battery}.jsonl", deterministic=False))
        batch = agents.run_batch(
            _specs(cfg, people.agent_ids, prompts), backend, agents.AnswerSchema.for_battery(scs), cfg.concurrency, transcript
        )
        if batch.failures:
            run.manifest.failures[battery] = dict(batch.failures)
        raw[battery] = {a: p.answers for a, p in batch.succeeded}

    complete = [a for a in people.agent_ids if all(a in raw[b] for b in batteries)]
    names = [sc.name for b in batteries for sc in batteries[b]]
    lo, hi = next(iter(batteries.values()))[0].response_range
    rows = []
    for a in complete:
        vals = [raw[b][a][sc.name] for b in batteries for sc in batteries[b]]
        means = [np.mean([lo + hi - raw[b][a][sc.name] for sc in batteries[b]]) for b in batteries]
        rows.append([a] + vals + [fmt(m) for m in means])
    write_csv(run.file("scenario_responses.csv"), ["agent_id"] + names + [f"{b}_mean" for b in batteries], rows)

    X = np.array([[domain_scores[a][d] for d in DOMAINS] for a in complete])
    outcomes: list[tuple[str, str, np.ndarray]] = []
    for b, scs in batteries.items():
        # reverse-coded so that higher means more risk-taking / more empathy
        rev = np.array([[lo + hi - raw[b][a][sc.name] for sc in scs] for a in complete], dtype=float)
        outcomes.append((b, f"{b}_mean", rev.mean(axis=1)))
        if cfg.per_scenario:
            outcomes.extend((b, sc.name, rev[:, k]) for k, sc in enumerate(scs))
    reg_rows = []
    for battery, outcome, y in outcomes:
        fit = psychometrics.ols_regress(y, X, DOMAINS, standardize=cfg.standardize)
        for d in DOMAINS:
            reg_rows.append([
                battery, outcome, d, fmt(fit.coefficients[d]), fmt(fit.std_errors[d]), fmt(fit.t_stats[d]),
                fmt(fit.p_values[d], 8), int(fit.p_values[d] < 0.05), fmt(fit.r_squared), fit.n,
            ])
    write_csv(
        run.file("regression.csv"),
        ["battery", "outcome", "predictor", "beta", "se", "t", "p", "significant", "r_squared", "n"],
        reg_rows,
    )
    return run.finish()


STUDY_COMMANDS = {
    "study1": cmd_study1,
    "simulate": cmd_simulate,
    "study2": cmd_study23,
    "study3": cmd_study23,
    "study4": cmd_study4,
}


def run_study(cfg: RunConfig) -> RunManifest:
    if cfg.study == "study2" and not cfg.input_matrix:
        raise PipelineError("study2 needs an input BFI2 response matrix (--input)")
    if cfg.study == "study3" and cfg.input_matrix:
        raise PipelineError("study3 simulates its personas; drop --input or use study2")
    return STUDY_COMMANDS[cfg.study](cfg)


# -- report ------------------------------------------------------------------------------------

def find_manifests(run_dir: str | Path) -> list[Path]:
    run_dir = Path(run_dir)
    if (run_dir / MANIFEST).exists():
        return [run_dir / MANIFEST]
    found = sorted(run_dir.glob(f"*/{MANIFEST}"))
    if not found:
        raise ReportError(f"{run_dir}: no {MANIFEST} found")
    return found


def verify_outputs(manifest_path: Path) -> RunManifest:
    man = RunManifest.read(manifest_path)
    base = manifest_path.parent
    for rel, meta in sorted(man.outputs.items()):
        p = base / rel
        if not p.exists():
            raise ReportError(f"{p}: listed in the manifest but missing")
        if sha256_file(p) != meta["sha256"]:
            raise ReportError(f"{p}: hash mismatch against the manifest (file changed after the run)")
    return man


def _md_table(header: Sequence[str], rows: Sequence[Sequence[Any]]) -> list[str]:
    out = ["| " + " | ".join(map(str, header)) + " |", "|" + "---|" * len(header)]
    out += ["| " + " | ".join(map(str, r)) + " |" for r in rows]
    return out


def _r3(s: str) -> str:
    return "NA" if s == "NA" else f"{float(s):.3f}"


def _reference() -> dict:
    return json.loads(scales.data_path("reference_values.json").read_text(encoding="utf-8"))


def cmd_report(run_dir: str | Path) -> Path:
    """Verify every study under ``run_dir`` and render ``report/report.md`` plus figures."""
    from . import plotting

    run_dir = Path(run_dir)
    studies = {}
    for mp in find_manifests(run_dir):
        man = verify_outputs(mp)
        studies[man.study] = (mp.parent, man)
    out = run_dir / "report"
    out.mkdir(exist_ok=True)
    ref = _reference()
    label = ref[REFERENCE_LABEL_KEY]
    lines = [
        "# Persona validation report",
        "",
        "Domain scores are item means after reverse-coding (min + max - answer); every statistic below is",
        "correlation- or regression-based, so means and sums give the same results.",
        "",
        "Studies found: " + ", ".join(sorted(studies)),
        "",
    ]

    if "study1" in studies:
        d, _ = studies["study1"]
        lines += ["## Semantic similarity between instruments", ""]
        overall = read_csv(d / "similarity_overall.csv")
        names = [r["test"] for r in overall]
        lines += _md_table(["test"] + names, [[r["test"]] + [_r3(r[n]) for n in names] for r in overall])
        lines += ["", "Mean similarity with the other instruments:", ""]
        means = read_csv(d / "mean_similarity.csv")
        lines += _md_table(["test", "overall"] + list(DOMAINS), [[r["test"]] + [_r3(r[k]) for k in ["overall", *DOMAINS]] for r in means])
        low = min(means, key=lambda r: float(r["overall"]))["test"]
        lines += ["", f"Lowest mean cross-instrument similarity: {low}.", ""]
        summ = read_csv(d / "tsne_summary.csv")[0]
        lines += [
            f"t-SNE: {summ['n_points']} items, perplexity {float(summ['perplexity']):.2f}, {summ['iterations']} iterations; "
            f"KL {float(summ['kl_exaggeration_end']):.4f} after exaggeration, {float(summ['kl_final']):.4f} final; "
            f"domain silhouette {float(summ['silhouette_domain']):.3f}.",
            "",
        ]
        panels = {k: read_csv(d / f"similarity_{k}.csv") for k in ("overall", *DOMAINS)}
        plotting.similarity_figure(panels, out / "fig_similarity.png")
        plotting.tsne_figure(read_csv(d / "tsne_points.csv"), out / "fig_tsne.png")
        lines += ["![similarity](fig_similarity.png)", "", "![t-SNE](fig_tsne.png)", ""]

    for study, refkey in (("study2", "convergent_study2_with_bfi2"), ("study3", "convergent_study3_with_bfi2")):
        if study not in studies:
            continue
        d, man = studies[study]
        lines += [f"## {study}: convergent correlations (Mini-Markers vs BFI2 input)", ""]
        conv = read_csv(d / "convergent.csv")
        rows = [[r["format"], r["n"]] + [_r3(r[k]) for k in [*DOMAINS, "average"]] for r in conv]
        for fmt_name, vals in ref[refkey].items():
            rows.append([f"{fmt_name} ({label})", ""] + [f"{vals[k]:.3f}" for k in [*DOMAINS, "Avg"]])
        lines += _md_table(["format", "n"] + [DOMAIN_NAMES[k] for k in DOMAINS] + ["Average"], rows)
        lines += ["", "### Reliability and one-factor CFA", ""]
        rel = read_csv(d / "reliability.csv")
        lines += _md_table(
            ["format", "domain", "alpha", "k", "dropped", "initial fit converged", "final fit converged"],
            [[r["format"], r["domain"], _r3(r["alpha"]), r["k_items"], r["dropped_items"] or "-",
              "yes" if r["initial_converged"] == "1" else "no", "yes" if r["final_converged"] == "1" else "no"] for r in rel],
        )
        notes = [f"- {r['format']} {r['domain']}: {r['diagnosis']}" for r in rel if r["diagnosis"]]
        if notes:
            lines += ["", "Diagnoses:", "", *notes]
        ref_key = "Study 2" if study == "study2" else "Study 3"
        ref_rows = [[k, *[f"{v[x]:.3f}" for x in DOMAINS]] for k, v in ref["reliability"].items() if k.startswith(ref_key) or k == "Human"]
        lines += ["", f"Alpha, {label}:", ""] + _md_table(["sample", *DOMAINS], ref_rows)
        lines += ["", "Standardized loadings:", ""]
        load = read_csv(d / "cfa_loadings.csv")
        lines += _md_table(["format", "domain", "item", "loading", "uniqueness", "Heywood"],
                           [[r["format"], r["domain"], r["item"], _r3(r["loading"]), _r3(r["uniqueness"]), r["heywood"]] for r in load])
        if man.failures:
            lines += ["", "Agent failures: " + ", ".join(f"{k}: {len(v)}" for k, v in sorted(man.failures.items()))]
        plotting.convergent_figure(conv, out / f"fig_convergent_{study}.png")
        lines += ["", f"![convergent](fig_convergent_{study}.png)", ""]

    if "study4" in studies:
        d, man = studies["study4"]
        lines += ["## study4: scenario regressions on BFI2 domain scores", "", "Stars mark p < .05.", ""]
        reg = read_csv(d / "regression.csv")
        outcomes = list(dict.fromkeys((r["battery"], r["outcome"]) for r in reg))
        rows = []
        for b, o in outcomes:
            sub = {r["predictor"]: r for r in reg if r["outcome"] == o}
            rows.append([o, sub[DOMAINS[0]]["n"]] + [f"{float(sub[k]['beta']):.3f}" + ("*" if sub[k]["significant"] == "1" else "") for k in DOMAINS]
                        + [_r3(sub[DOMAINS[0]]["r_squared"])])
            for who, vals in ref["regression"].get(b, {}).items():
                rows.append([f"{b} {who} ({label})", ""] + [f"{vals[k][0]:.3f}" + ("*" if vals[k][1] else "") for k in DOMAINS] + [""])
        lines += _md_table(["outcome", "n", *DOMAINS, "R2"], rows)
        if man.failures:
            lines += ["", "Agent failures: " + ", ".join(f"{k}: {len(v)}" for k, v in sorted(man.failures.items()))]
        plotting.regression_figure(reg, out / "fig_regression.png")
        lines += ["", "![regression](fig_regression.png)", ""]

    if "simulate" in studies:
        d, man = studies["simulate"]
        lines += ["## simulate", "", f"{man.config['n_agents']} simulated BFI2 respondents (seed {man.config['seed']}).", ""]

    lines += ["## Provenance", ""]
    for s in sorted(studies):
        _, man = studies[s]
        lines.append(f"- {s}: toolkit {man.toolkit_version}, {len(man.outputs)} outputs verified, {len(man.inputs)} inputs hashed")
    path = out / "report.md"
    path.write_text("\n".join(lines) + "\n", encoding="utf-8")
    return path
