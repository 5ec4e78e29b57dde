"""Stage functions behind the CLI.

Every stage reads named artifacts from the work directory, writes its own,
and records them in ``manifest.json`` together with the SHA-256 of each input
it consumed.  A stage refuses an input that is missing, that was edited after
being written, or whose own recorded inputs have since changed (stale), unless
``force`` is set.  Nothing time-dependent is written, so identical config and
inputs give byte-identical artifacts.
"""

from __future__ import annotations

import hashlib
import json
import logging
import shutil
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict
from pathlib import Path
from typing import Any, Callable

import numpy as np

from . import agent, assignment, churn, evaluation, ingest, lda, sessions, synth
from .config import PipelineConfig
from .errors import ConfigError, EmptyGroup, MissingArtifact, StaleArtifact, TrajectoryTooShort

log = logging.getLogger(__name__)

MANIFEST = "manifest.json"
SOURCE = "source"  # dependency key for an input file that lives outside the work directory
ARTIFACTS = {
    "synth_tsv": "synth.tsv",
    "ground_truth": "ground_truth.json",
    "events": "events.ndjson",
    "sessions": "sessions.ndjson",
    "taste_model": "taste_model.json",
    "perplexity_grid": "perplexity_grid.csv",
    "model_selection": "model_selection.json",
    "trajectories": "trajectories.ndjson",
    "policies": "policies.json",
    "convergence": "convergence.csv",
    "evaluation": "evaluation.json",
    "evaluation_csv": "evaluation.csv",
    "vop_csv": "vop.csv",
    "vop": "vop.json",
    "churn_users": "churn_users.csv",
    "churn_monthly": "churn_monthly.csv",
    "churn_groups": "churn_groups.csv",
    "churn": "churn.json",
}


def sha256(path: Path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def dump_json(obj: Any, path: Path) -> None:
    path.write_text(json.dumps(obj, sort_keys=True, indent=1) + "\n", encoding="utf-8")


class Workspace:
    def __init__(self, root: str | Path, force: bool = False) -> None:
        self.root = Path(root)
        self.root.mkdir(parents=True, exist_ok=True)
        self.force = force
        mpath = self.root / MANIFEST
        self.manifest: dict[str, dict] = json.loads(mpath.read_text()) if mpath.exists() else {}

    def path(self, name: str) -> Path:
        return self.root / ARTIFACTS[name]

    def require(self, *names: str) -> dict[str, str]:
        """Check inputs exist and are fresh; return their current hashes."""
        hashes = {}
        for name in names:
            p = self.path(name)
            if not p.exists():
                raise MissingArtifact(f"{p.name} not found in {self.root}; run the upstream stage first")
            digest = sha256(p)
            entry = self.manifest.get(name)
            if not self.force:
                if entry is None:
                    raise StaleArtifact(f"{p.name} is not in the manifest (use --force to accept it)")
                if entry["sha256"] != digest:
                    raise StaleArtifact(f"{p.name} changed since it was written (use --force)")
                for dep, dep_hash in entry["inputs"].items():
                    dp = Path(entry["source"]) if dep == SOURCE else self.path(dep)
                    if not dp.exists() or sha256(dp) != dep_hash:
                        raise StaleArtifact(f"{p.name} is stale: {dp.name} changed after it was built (use --force)")
            hashes[name] = digest
        return hashes

    def record(self, inputs: dict[str, str], *names: str, source: Path | None = None) -> None:
        for name in names:
            entry = {"file": ARTIFACTS[name], "sha256": sha256(self.path(name)), "inputs": dict(inputs)}
            if source is not None:
                entry["source"] = str(source)
            self.manifest[name] = entry
        dump_json(self.manifest, self.root / MANIFEST)

    def write_summary(self, stage: str, summary: dict) -> None:
        dump_json(summary, self.root / f"summary_{stage.replace('-', '_')}.json")


# -- stages -------------------------------------------------------------------


def run_synth(cfg: PipelineConfig, ws: Workspace) -> dict:
    log_, gt = synth.generate(cfg.synth)
    with open(ws.path("synth_tsv"), "w", encoding="utf-8", newline="") as fh:
        ingest.write_tsv(log_, fh)
    gt.save(ws.path("ground_truth"))
    ws.record({}, "synth_tsv", "ground_truth")
    st = ingest.dataset_stats(log_)
    return {"stage": "synth", **asdict(st), "n_tastes": cfg.synth.n_tastes, "policy": cfg.synth.policy}


def _input_path(cfg: PipelineConfig, ws: Workspace) -> tuple[Path, dict[str, str], Path | None]:
    if cfg.paths.input:
        p = Path(cfg.paths.input)
        if not p.exists():
            raise MissingArtifact(f"input log {p} not found")
        return p, {SOURCE: sha256(p)}, p
    return ws.path("synth_tsv"), ws.require("synth_tsv"), None


def run_ingest(cfg: PipelineConfig, ws: Workspace) -> dict:
    src, inputs, external = _input_path(cfg, ws)
    raw = ingest.read_tsv(src, strict=cfg.ingest.strict)
    before = ingest.dataset_stats(raw)
    pruned = ingest.prune_vocabulary(raw, cfg.ingest.min_count)
    after = ingest.dataset_stats(pruned)
    ingest.save_cache(pruned, ws.path("events"))
    ws.record(inputs, "events", source=external)
    return {
        "stage": "ingest",
        "skipped_lines": raw.skipped,
        "raw": asdict(before),
        "pruned": asdict(after),
        "min_count": cfg.ingest.min_count,
    }


def run_sessionize(cfg: PipelineConfig, ws: Workspace) -> dict:
    inputs = ws.require("events")
    log_ = ingest.load_cache(ws.path("events"))
    ss = sessions.sessionize(log_, int(round(cfg.sessions.max_gap_minutes * 60)))
    sessions.write_sessions(ss, ws.path("sessions"))
    ws.record(inputs, "sessions")
    counts = [len(v) for v in ss.values()]
    return {
        "stage": "sessionize",
        "users": len(ss),
        "sessions": int(sum(counts)),
        "sessions_per_user_min": int(min(counts)),
        "sessions_per_user_max": int(max(counts)),
        "max_gap_minutes": cfg.sessions.max_gap_minutes,
    }


def _corpus(cfg: PipelineConfig, ws: Workspace):
    log_ = ingest.load_cache(ws.path("events"))
    ss = sessions.read_sessions(ws.path("sessions"))
    corpus = sessions.build_corpus(ss, log_.vocab_size, cfg.sessions.granularity)
    return log_, corpus


def run_select_model(cfg: PipelineConfig, ws: Workspace) -> dict:
    inputs = ws.require("events", "sessions")
    _, corpus = _corpus(cfg, ws)
    sel = lda.select_model(
        corpus,
        cfg.lda.k_candidates,
        cfg.lda.iteration_candidates,
        cfg.lda.heldout_fraction,
        cfg.lda.seed,
        cfg.lda.elbow_tolerance,
        cfg.lda.fold_in_iterations,
        cfg.lda.hyper_doc,
        cfg.lda.hyper_word,
        threads=cfg.run.threads,
    )
    sel.write_csv(ws.path("perplexity_grid"))
    summary = {
        "best_K": sel.best_k,
        "best_iterations": sel.best_iterations,
        "tolerance": sel.tolerance,
        "grid": [{"K": k, "iterations": it, "perplexity": p} for k, it, p in sel.grid],
    }
    dump_json(summary, ws.path("model_selection"))
    ws.record(inputs, "perplexity_grid", "model_selection")
    return {"stage": "select-model", **summary}


def run_train_lda(cfg: PipelineConfig, ws: Workspace) -> dict:
    if cfg.lda.K < 1:
        raise ConfigError(f"lda.K must be >= 1, got {cfg.lda.K}")
    if cfg.lda.iterations < 1:
        raise ConfigError(f"lda.iterations must be >= 1, got {cfg.lda.iterations}")
    inputs = ws.require("events", "sessions")
    log_, corpus = _corpus(cfg, ws)
    model = lda.train(
        corpus,
        cfg.lda.K,
        cfg.lda.iterations,
        cfg.lda.hyper_doc,
        cfg.lda.hyper_word,
        cfg.lda.seed,
        vocabulary=[t.track_id for t in log_.tracks],
        n_samples=cfg.lda.n_samples,
        lag=cfg.lda.lag,
        restarts=cfg.lda.restarts,
        threads=cfg.run.threads,
    )
    model.save(ws.path("taste_model"))
    ws.record(inputs, "taste_model")
    top = {k: [log_.tracks[t].track_id for t, _ in lda.top_tracks(model, k, 5)] for k in range(model.K)}
    return {
        "stage": "train-lda",
        "K": model.K,
        "V": model.V,
        "documents": len(corpus),
        "tokens": corpus.n_tokens,
        "iterations": model.iterations,
        "restarts": cfg.lda.restarts,
        "chosen_seed": model.seed,
        "hyper_doc": model.hyper_doc,
        "hyper_word": model.hyper_word,
        "train_log_likelihood": model.log_likelihood,
        "top_tracks": top,
    }


def run_assign(cfg: PipelineConfig, ws: Workspace) -> dict:
    inputs = ws.require("taste_model", "sessions")
    model = lda.TasteModel.load(ws.path("taste_model"))
    ss = sessions.read_sessions(ws.path("sessions"))
    trajs = assignment.build_trajectories(model, ss)
    assignment.write_trajectories(trajs, ws.path("trajectories"))
    ws.record(inputs, "trajectories")
    occupancy = np.zeros(model.K, dtype=int)
    for t in trajs.values():
        occupancy += np.bincount(t.assigned, minlength=model.K)
    return {"stage": "assign", "users": len(trajs), "sessions": int(occupancy.sum()), "taste_occupancy": occupancy.tolist()}


def split_episodes(cfg: PipelineConfig, traj: assignment.TasteTrajectory):
    """Chronological split of one trajectory into (train, held-out) episodes.

    Held-out episodes are the transitions *into* held-out sessions, including
    the one from the last training session.
    """
    n = len(traj)
    if n < cfg.sessions.min_sessions:
        return None
    n_train = sessions.train_count(n, cfg.sessions.train_fraction)
    eps = agent.label_transitions(traj)
    return eps[: n_train - 1], eps[n_train - 1 :]


def _episode_sets(cfg: PipelineConfig, trajs):
    train, held, sparse = {}, {}, []
    for u, t in trajs.items():
        split = split_episodes(cfg, t)
        if split is None:
            sparse.append(u)
            continue
        train[u], held[u] = split
    return train, held, sparse


def run_train_policy(cfg: PipelineConfig, ws: Workspace) -> dict:
    inputs = ws.require("trajectories", "taste_model")
    model = lda.TasteModel.load(ws.path("taste_model"))
    trajs = assignment.read_trajectories(ws.path("trajectories"))
    train, _, sparse = _episode_sets(cfg, trajs)
    users = sorted(train)

    def fit(u: str):
        return agent.train_policy(train[u], cfg.agent.for_user(u), model.K, u)[0]

    if cfg.run.threads > 1:
        with ThreadPoolExecutor(max_workers=cfg.run.threads) as ex:
            tables = dict(zip(users, ex.map(fit, users)))
    else:
        tables = {u: fit(u) for u in users}
    agent.save_policies(tables, ws.path("policies"), cfg.agent)
    agent.write_traces(tables, ws.path("convergence"))
    ws.record(inputs, "policies", "convergence")
    conv = [t.converged for t in tables.values()]
    return {
        "stage": "train-policy",
        "users": len(tables),
        "sparse_users_excluded": sorted(sparse),
        "converged_fraction": float(np.mean(conv)) if conv else 0.0,
        "median_sweeps": float(np.median([t.sweeps_run for t in tables.values()])) if tables else 0.0,
        "lr_counter": cfg.agent.lr_counter,
    }


def _policies_and_episodes(cfg: PipelineConfig, ws: Workspace):
    tables = agent.load_policies(ws.path("policies"))
    trajs = assignment.read_trajectories(ws.path("trajectories"))
    train, held, _ = _episode_sets(cfg, trajs)
    policies = {u: agent.extract_policy(t) for u, t in tables.items()}
    return tables, policies, train, held


def run_evaluate(cfg: PipelineConfig, ws: Workspace) -> dict:
    inputs = ws.require("policies", "trajectories")
    tables, policies, train, held = _policies_and_episodes(cfg, ws)
    extra = {u: {"converged": t.converged, "sweeps": t.sweeps_run} for u, t in tables.items()}
    report = evaluation.evaluate_users(policies, train, held, cfg.eval.zero_division, extra)
    report.save(ws.path("evaluation"))
    report.write_csv(ws.path("evaluation_csv"))
    ws.record(inputs, "evaluation", "evaluation_csv")
    return {"stage": "evaluate", **report.summary()}


def run_vop(cfg: PipelineConfig, ws: Workspace) -> dict:
    inputs = ws.require("policies", "trajectories")
    _, policies, _, held = _policies_and_episodes(cfg, ws)
    vop = evaluation.value_of_personalization(policies, held, cfg.eval.zero_division)
    vop.write_csv(ws.path("vop_csv"))
    summary = {
        "users": vop.users,
        "delta": vop.delta.tolist(),
        "mean_delta": vop.mean_delta,
        "fraction_positive": float(np.mean(vop.delta > 0)),
        "zero_division": cfg.eval.zero_division,
    }
    dump_json(summary, ws.path("vop"))
    ws.record(inputs, "vop_csv", "vop")
    return {"stage": "vop", "users": len(vop.users), "mean_delta": vop.mean_delta, "fraction_positive": summary["fraction_positive"]}


def run_churn_report(cfg: PipelineConfig, ws: Workspace) -> dict:
    inputs = ws.require("trajectories", "events")
    trajs = assignment.read_trajectories(ws.path("trajectories"))
    log_ = ingest.load_cache(ws.path("events"))
    if cfg.churn.dataset_end:
        end = ingest.parse_timestamp(cfg.churn.dataset_end)
    else:
        end = int(max(ts.max() for ts in log_.timestamps.values()))
    series = {}
    for u, t in trajs.items():
        try:
            series[u] = churn.similarity_series(t, cfg.churn.similarity)
        except TrajectoryTooShort:
            continue
    labels = {u: churn.churn_label(u, log_.timestamps[u], end, cfg.churn.year_days) for u in log_.user_ids}
    monthly = {u: churn.monthly_activity(log_.timestamps[u]) for u in log_.user_ids}
    groups = churn.subgroup_report({u: l.label for u, l in labels.items()}, series, required=())
    missing = [g.value for g in (churn.ChurnClass.QUITTING, churn.ChurnClass.CONTINUING) if g.value not in groups]
    churn.write_user_csv(series, labels, ws.path("churn_users"))
    churn.write_monthly_csv(monthly, ws.path("churn_monthly"))
    churn.write_group_csv(groups, ws.path("churn_groups"))
    summary = {
        "dataset_end": ingest.format_timestamp(end),
        "groups": {g: asdict(s) for g, s in groups.items()},
        "missing_groups": missing,
        "activity_slope": {u: churn.activity_slope(m) for u, m in monthly.items()},
    }
    dump_json(summary, ws.path("churn"))
    ws.record(inputs, "churn_users", "churn_monthly", "churn_groups", "churn")
    if missing:
        log.warning("%s", EmptyGroup(f"no users labelled {', '.join(missing)}"))
    return {"stage": "churn-report", "groups": summary["groups"], "missing_groups": missing}


STAGES: dict[str, Callable[[PipelineConfig, Workspace], dict]] = {
    "synth": run_synth,
    "ingest": run_ingest,
    "sessionize": run_sessionize,
    "select-model": run_select_model,
    "train-lda": run_train_lda,
    "assign": run_assign,
    "train-policy": run_train_policy,
    "evaluate": run_evaluate,
    "vop": run_vop,
    "churn-report": run_churn_report,
}


def run_stage(name: str, cfg: PipelineConfig, ws: Workspace | None = None) -> dict:
    ws = ws or Workspace(cfg.paths.workdir, cfg.run.force)
    summary = STAGES[name](cfg, ws)
    ws.write_summary(name, summary)
    return summary


def run_all(cfg: PipelineConfig, ws: Workspace | None = None) -> dict[str, dict]:
    cfg.validate()
    ws = ws or Workspace(cfg.paths.workdir, cfg.run.force)
    order = ["ingest", "sessionize"]
    if not cfg.paths.input:
        order.insert(0, "synth")
    out = {}
    for name in order:
        out[name] = run_stage(name, cfg, ws)
    if cfg.lda.auto_k:
        out["select-model"] = run_stage("select-model", cfg, ws)
        cfg.lda.K = out["select-model"]["best_K"]
        cfg.lda.iterations = max(cfg.lda.iterations, out["select-model"]["best_iterations"])
    for name in ("train-lda", "assign", "train-policy", "evaluate", "vop", "churn-report"):
        out[name] = run_stage(name, cfg, ws)
    ws.write_summary("run-all", out)
    return out


def clean(workdir: str | Path) -> None:
    shutil.rmtree(workdir, ignore_errors=True)
