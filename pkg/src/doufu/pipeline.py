"""Experiment orchestration: config file, workspace layout, stage runners."""
from __future__ import annotations

import configparser
import hashlib
import io
import json
import os
import tempfile
from contextlib import contextmanager
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import numpy as np

from . import evalkit
from .core import (DEFAULT_SNAP_RADIUS_M, TrajectoryError, parse_trajectories, read_network,
                   serialize_trajectories, snap_to_route, write_network)
from .features import (DEFAULT_BUFFER_M, DEFAULT_STRIDE, DEFAULT_WINDOW, FeatureNormalizers,
                       dump_manifest, featurize, global_dim, read_feature_cache, route_dim,
                       write_feature_cache)
from .model import (VARIANTS, DouFuModel, ModelConfig, ModelError, NumericFailure, embed,
                    read_embeddings, train, write_embeddings)
from .nn import load_tensors, save_store, save_tensors
from .roadgraph import (build_graph, pretrain, read_embedding_table, write_embedding_table,
                        write_graph)
from .synthgen import (NetworkSpec, generate_dataset, generate_network, make_profiles,
                       read_routes, write_routes)

STAGES = ("gen", "featurize", "pretrain", "train", "embed", "eval")
UPSTREAM = {"featurize": "gen", "pretrain": "featurize", "train": "pretrain",
            "embed": "train", "eval": "embed"}
UNTRAINED = "untrained"


class ConfigError(ValueError):
    pass


class MissingArtifact(RuntimeError):
    pass


class WorkspaceBusy(RuntimeError):
    pass


# ------------------------------------------------------------------ configuration

@dataclass
class SynthConfig:
    grid_rows: int = 8
    grid_cols: int = 8
    cell_m: float = 400.0
    origin_lat: float = 39.90
    origin_lng: float = 116.30
    zone_seed: int = 7
    class_seed: int = 11
    zone_k: int = 5
    n_classes: int = 5
    n_users: int = 20
    per_user: int = 30
    sample_period_s: float = 5.0
    noise_m: float = 5.0
    home_prob: float = 0.5
    hour_spread: float = 1.0
    min_hops: int = 4
    seed: int = 0


@dataclass
class FeatureConfig:
    window: int = DEFAULT_WINDOW
    stride: int = DEFAULT_STRIDE
    buffer_m: float = DEFAULT_BUFFER_M
    snap_radius_m: float = DEFAULT_SNAP_RADIUS_M
    train_per_user: int = 20


@dataclass
class GraphConfig:
    d_z: int = 32
    hidden: int = 64
    epochs: int = 200
    lr: float = 0.01
    seed: int = 0


@dataclass
class ModelSection:
    d: int = 64
    heads: int = 4
    d_ff: int = 128
    depth: int = 2
    n_reduce: int = 2
    embed_dim: int = 64
    alpha: float = 0.5
    beta: float = 0.5
    epochs: int = 15
    lr: float = 3e-3
    batch: int = 32
    seeds: tuple = (0, 1, 2)
    variants: tuple = VARIANTS


@dataclass
class EvalConfig:
    folds: int = 10
    learners: tuple = evalkit.LEARNERS
    k: int = 0   # 0 means the number of users


@dataclass
class ExperimentConfig:
    synthgen: SynthConfig = field(default_factory=SynthConfig)
    features: FeatureConfig = field(default_factory=FeatureConfig)
    roadgraph: GraphConfig = field(default_factory=GraphConfig)
    model: ModelSection = field(default_factory=ModelSection)
    eval: EvalConfig = field(default_factory=EvalConfig)
    workspace: str = "workspace"

    def model_config(self, variant: str, seed: int, epochs: int | None = None) -> ModelConfig:
        m = self.model
        return ModelConfig(d=m.d, heads=m.heads, d_ff=m.d_ff, depth=m.depth, n_reduce=m.n_reduce,
                           embed_dim=m.embed_dim, alpha=m.alpha, beta=m.beta, variant=variant,
                           epochs=m.epochs if epochs is None else epochs, lr=m.lr,
                           batch=m.batch, seed=seed)

    def section_dict(self, name: str) -> dict:
        d = asdict(getattr(self, name))
        return {k: list(v) if isinstance(v, tuple) else v for k, v in d.items()}

    def validate(self):
        errs = []
        s, f, g, m, e = self.synthgen, self.features, self.roadgraph, self.model, self.eval
        if s.n_users < 2:
            errs.append("synthgen.n_users must be >= 2")
        if s.per_user < 2:
            errs.append("synthgen.per_user must be >= 2")
        if not 1 <= f.train_per_user < s.per_user:
            errs.append("features.train_per_user must lie in [1, per_user)")
        if s.per_user - f.train_per_user < e.folds:
            errs.append(f"held-out trajectories per user ({s.per_user - f.train_per_user}) "
                        f"fewer than eval.folds ({e.folds})")
        if f.window < 2 or f.stride < 1:
            errs.append("features.window must be >= 2 and stride >= 1")
        if g.d_z < 1 or g.epochs < 0 or not g.lr > 0:
            errs.append("roadgraph hyperparameters invalid")
        bad = [v for v in m.variants if v not in VARIANTS]
        if bad:
            errs.append(f"unknown variant(s): {', '.join(bad)}")
        if not m.variants:
            errs.append("model.variants is empty")
        if len(set(m.seeds)) != len(m.seeds) or not m.seeds:
            errs.append("model.seeds must be a non-empty list of distinct integers")
        badl = [l for l in e.learners if l not in evalkit.LEARNERS]
        if badl:
            errs.append(f"unknown learner(s): {', '.join(badl)}")
        try:
            NetworkSpec(s.grid_rows, s.grid_cols, s.cell_m, (s.origin_lat, s.origin_lng),
                        s.zone_seed, s.class_seed, s.zone_k, s.n_classes)
            for v in m.variants[:1]:
                self.model_config(v, m.seeds[0])
        except (TrajectoryError, ModelError) as exc:
            errs.append(str(exc))
        if errs:
            raise ConfigError("; ".join(errs))
        return self


def _convert(value: str, default):
    if isinstance(default, bool):
        return value.strip().lower() in ("1", "true", "yes", "on")
    if isinstance(default, int):
        return int(value)
    if isinstance(default, float):
        return float(value)
    if isinstance(default, tuple):
        items = [v.strip() for v in value.split(",") if v.strip()]
        if default and isinstance(default[0], int):
            return tuple(int(v) for v in items)
        return tuple(items)
    return value.strip()


def load_config(path: str | os.PathLike | None, workspace: str | None = None) -> ExperimentConfig:
    """Read an INI file; unknown keys are errors. DOUFU_WORKSPACE, then ``workspace``, override paths."""
    cfg = ExperimentConfig()
    if path is not None:
        cp = configparser.ConfigParser()
        try:
            with open(path) as fh:
                cp.read_file(fh)
        except (OSError, configparser.Error) as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from exc
        for section in cp.sections():
            if section == "paths":
                for key, value in cp.items(section):
                    if key != "workspace":
                        raise ConfigError(f"unknown key paths.{key}")
                    base = Path(path).resolve().parent
                    cfg.workspace = str((base / value).resolve()) if not os.path.isabs(value) else value
                continue
            if section not in ("synthgen", "features", "roadgraph", "model", "eval"):
                raise ConfigError(f"unknown section [{section}]")
            target = getattr(cfg, section)
            known = {f.name: getattr(target, f.name) for f in fields(target)}
            for key, value in cp.items(section):
                if key not in known:
                    raise ConfigError(f"unknown key {section}.{key}")
                try:
                    setattr(target, key, _convert(value, known[key]))
                except ValueError as exc:
                    raise ConfigError(f"{section}.{key}: {exc}") from exc
    env = os.environ.get("DOUFU_WORKSPACE")
    if env:
        cfg.workspace = env
    if workspace:
        cfg.workspace = workspace
    return cfg.validate()


def render_config(cfg: ExperimentConfig) -> str:
    cp = configparser.ConfigParser()
    cp["paths"] = {"workspace": cfg.workspace}
    for name in ("synthgen", "features", "roadgraph", "model", "eval"):
        cp[name] = {k: ",".join(map(str, v)) if isinstance(v, (list, tuple)) else str(v)
                    for k, v in asdict(getattr(cfg, name)).items()}
    buf = io.StringIO()
    cp.write(buf)
    return buf.getvalue()


# ------------------------------------------------------------------ workspace helpers

def sha256_file(path: Path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def atomic_write(path: Path, data: bytes | str) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    if isinstance(data, str):
        data = data.encode("utf-8")
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.", suffix=".tmp")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


class Workspace:
    def __init__(self, root: str | os.PathLike):
        self.root = Path(root)

    def stage_dir(self, stage: str) -> Path:
        return self.root / stage

    def manifest_path(self, stage: str) -> Path:
        return self.stage_dir(stage) / "manifest"

    def read_manifest(self, stage: str) -> dict | None:
        p = self.manifest_path(stage)
        if not p.exists():
            return None
        return json.loads(p.read_text())

    def require(self, stage: str, what: str) -> dict:
        """Upstream manifest, after checking every recorded artifact still matches its hash."""
        man = self.read_manifest(stage)
        if man is None:
            raise MissingArtifact(f"missing {what}, run {stage}")
        for name, digest in man["outputs"].items():
            p = self.stage_dir(stage) / name
            if not p.exists():
                raise MissingArtifact(f"missing {what} ({stage}/{name}), run {stage}")
            if sha256_file(p) != digest:
                raise MissingArtifact(f"stale {what}: {stage}/{name} changed since it was "
                                      f"written, run {stage}")
        return man

    def write_outputs(self, stage: str, files: dict[str, bytes | str], inputs: dict,
                      params: dict, extra: dict | None = None) -> dict:
        d = self.stage_dir(stage)
        d.mkdir(parents=True, exist_ok=True)
        for name, data in files.items():
            atomic_write(d / name, data)
        man = {"stage": stage, "params": params, "inputs": inputs,
               "outputs": {name: sha256_file(d / name) for name in sorted(files)}}
        if extra:
            man["extra"] = extra
        atomic_write(self.manifest_path(stage), json.dumps(man, indent=1, sort_keys=True) + "\n")
        return man

    @contextmanager
    def lock(self):
        self.root.mkdir(parents=True, exist_ok=True)
        p = self.root / ".lock"
        try:
            fd = os.open(p, os.O_CREAT | os.O_EXCL | os.O_WRONLY)
        except FileExistsError:
            raise WorkspaceBusy(f"workspace {self.root} is locked by another run ({p})") from None
        try:
            os.write(fd, str(os.getpid()).encode())
            os.close(fd)
            yield self
        finally:
            try:
                os.unlink(p)
            except FileNotFoundError:
                pass


def _bytes(writer, *args) -> bytes:
    buf = io.StringIO()
    writer(*args, buf)
    return buf.getvalue().encode("utf-8")


def _tensor_bytes(tensors: dict, extra: dict | None = None) -> bytes:
    buf = io.BytesIO()
    save_tensors(buf, tensors, extra)
    return buf.getvalue()


def run_key(variant: str, seed: int) -> str:
    return f"{variant}-s{seed}"


# ------------------------------------------------------------------ stages

def stage_gen(cfg: ExperimentConfig, ws: Workspace, log=print) -> dict:
    s = cfg.synthgen
    spec = NetworkSpec(s.grid_rows, s.grid_cols, s.cell_m, (s.origin_lat, s.origin_lng),
                       s.zone_seed, s.class_seed, s.zone_k, s.n_classes)
    net = generate_network(spec)
    profiles = make_profiles(s.n_users, net, s.seed, home_prob=s.home_prob,
                             hour_spread=s.hour_spread)
    sets, routes = generate_dataset(net, profiles, s.per_user, s.sample_period_s, s.seed,
                                    s.noise_m, s.min_hops)
    n = sum(len(ts.trajectories) for ts in sets)
    log(f"gen: {len(net)} segments, {len(sets)} users, {n} trajectories")
    files = {"network.csv": _bytes(write_network, net),
             "trajectories.csv": serialize_trajectories(sets).encode("utf-8"),
             "routes.csv": _bytes(write_routes, routes)}
    return ws.write_outputs("gen", files, {}, cfg.section_dict("synthgen"),
                            {"trajectories": n, "users": len(sets)})


def _load_gen(ws: Workspace):
    d = ws.stage_dir("gen")
    with open(d / "network.csv") as fh:
        net = read_network(fh)
    with open(d / "trajectories.csv") as fh:
        sets = parse_trajectories(fh)
    return net, sets


def stage_featurize(cfg: ExperimentConfig, ws: Workspace, log=print) -> dict:
    up = ws.require("gen", "trajectories")
    net, sets = _load_gen(ws)
    f = cfg.features
    feats, snapped, split = [], {}, {}
    for ts in sets:
        for k, traj in enumerate(ts.trajectories):
            route = snap_to_route(traj, net, f.snap_radius_m)
            snapped[traj.id] = route
            feats.append(featurize(traj, route, net, f.window, f.stride, f.buffer_m))
            split[traj.id] = "train" if k < f.train_per_user else "test"
    d_r, d_g = route_dim(net.zone_k, net.n_classes), global_dim(net.zone_k)
    buf = io.BytesIO()
    cache_manifest = write_feature_cache(buf, feats, d_r, d_g)
    for rec in cache_manifest["records"]:
        rec["split"] = split[rec["traj_id"]]
    norm = FeatureNormalizers.fit([x for x in feats if split[x.traj_id] == "train"])
    log(f"featurize: {len(feats)} trajectories, D_r={d_r}, D_g={d_g}")
    files = {"features.bin": buf.getvalue(),
             "features.json": dump_manifest(cache_manifest),
             "normalizer.bin": _tensor_bytes(norm.arrays()),
             "routes.csv": _bytes(write_routes, snapped)}
    return ws.write_outputs("featurize", files, {"gen": up["outputs"]},
                            cfg.section_dict("features"))


def load_features(ws: Workspace):
    d = ws.stage_dir("featurize")
    manifest = json.loads((d / "features.json").read_text())
    with open(d / "features.bin", "rb") as fh:
        feats = read_feature_cache(fh, manifest)
    with open(d / "normalizer.bin", "rb") as fh:
        norm = FeatureNormalizers.from_arrays(load_tensors(fh)[0])
    split = {r["traj_id"]: r["split"] for r in manifest["records"]}
    feats = [norm.apply(x) for x in feats]
    return ([x for x in feats if split[x.traj_id] == "train"],
            [x for x in feats if split[x.traj_id] == "test"])


def stage_pretrain(cfg: ExperimentConfig, ws: Workspace, log=print) -> dict:
    up = ws.require("featurize", "features")
    net, _ = _load_gen(ws)
    with open(ws.stage_dir("featurize") / "routes.csv") as fh:
        routes = read_routes(fh)
    graph = build_graph(routes.values(), net)
    g = cfg.roadgraph
    res = pretrain(graph, g.d_z, g.hidden, g.lr, g.epochs, g.seed)
    log(f"pretrain: |V|={len(graph.vertices)} |E|={len(graph.edges)} "
        f"loss {res.history[0] if res.history else float('nan'):.4f} -> "
        f"{res.history[-1] if res.history else float('nan'):.4f}")
    files = {"graph.csv": _bytes(write_graph, graph),
             "embeddings.csv": _bytes(write_embedding_table, res.table),
             "history.json": json.dumps(res.history) + "\n"}
    return ws.write_outputs("pretrain", files, {"featurize": up["outputs"]},
                            cfg.section_dict("roadgraph"))


def _table(ws: Workspace) -> dict:
    with open(ws.stage_dir("pretrain") / "embeddings.csv") as fh:
        return read_embedding_table(fh)


def _selected(cfg: ExperimentConfig, variant: str | None) -> tuple:
    if variant is None:
        return cfg.model.variants
    if variant not in VARIANTS:
        raise ConfigError(f"unknown variant {variant!r}")
    return (variant,)


def stage_train(cfg: ExperimentConfig, ws: Workspace, variant: str | None = None,
                log=print) -> dict:
    up = ws.require("pretrain", "pretrained segment embeddings")
    ws.require("featurize", "features")
    train_f, _ = load_features(ws)
    table = _table(ws)
    users = sorted({x.user for x in train_f})
    prev = ws.read_manifest("train") if variant is not None else None
    files, histories = {}, {}
    if prev is not None:
        # keep other variants' checkpoints when training one variant
        for name in prev["outputs"]:
            files[name] = (ws.stage_dir("train") / name).read_bytes()
        histories = prev.get("extra", {}).get("history", {})
    for v in _selected(cfg, variant):
        for seed in cfg.model.seeds:
            res = train(train_f, table, cfg.model_config(v, seed), users)
            key = run_key(v, seed)
            log(f"train {key}: loss {res.history[0] if res.history else float('nan'):.4f} -> "
                f"{res.history[-1] if res.history else float('nan'):.4f}")
            buf = io.BytesIO()
            save_store(buf, res.model.store, res.model.checkpoint_extra())
            files[f"{key}.ckpt"] = buf.getvalue()
            histories[key] = res.history
    return ws.write_outputs("train", files, {"pretrain": up["outputs"]},
                            cfg.section_dict("model"), {"history": histories})


def load_model(ws: Workspace, key: str) -> DouFuModel:
    p = ws.stage_dir("train") / f"{key}.ckpt"
    if not p.exists():
        raise MissingArtifact(f"missing checkpoint {key}, run train")
    with open(p, "rb") as fh:
        tensors, extra = load_tensors(fh)
    return DouFuModel.from_checkpoint(tensors, extra)


def _embedding_bytes(embs) -> bytes:
    return _bytes(write_embeddings, embs)


def stage_embed(cfg: ExperimentConfig, ws: Workspace, variant: str | None = None,
                log=print) -> dict:
    up = ws.require("train", "checkpoints")
    ws.require("pretrain", "pretrained segment embeddings")
    train_f, test_f = load_features(ws)
    table = _table(ws)
    users = sorted({x.user for x in train_f})
    prev = ws.read_manifest("embed") if variant is not None else None
    files = {}
    if prev is not None:
        for name in prev["outputs"]:
            files[name] = (ws.stage_dir("embed") / name).read_bytes()
    for v in _selected(cfg, variant):
        for seed in cfg.model.seeds:
            key = run_key(v, seed)
            model = load_model(ws, key)
            files[f"{key}.csv"] = _embedding_bytes(embed(model, test_f, table))
            if v == "double_fusion":
                # same architecture and seed, no training: the clustering reference
                fresh = DouFuModel(cfg.model_config(v, seed, epochs=0), model.dims, users)
                files[f"{UNTRAINED}-{key}.csv"] = _embedding_bytes(embed(fresh, test_f, table))
    log(f"embed: {len(files)} embedding files for {len(test_f)} held-out trajectories")
    return ws.write_outputs("embed", files, {"train": up["outputs"]}, cfg.section_dict("model"))


def _load_embedding_file(ws: Workspace, name: str) -> evalkit.LabeledEmbeddings:
    p = ws.stage_dir("embed") / name
    if not p.exists():
        raise MissingArtifact(f"missing embeddings {name}, run embed")
    with open(p) as fh:
        embs = read_embeddings(fh)
    return evalkit.LabeledEmbeddings(np.stack([e.vector for e in embs]),
                                     np.array([e.user for e in embs]),
                                     tuple(e.traj_id for e in embs))


def stage_eval(cfg: ExperimentConfig, ws: Workspace, variant: str | None = None,
               log=print) -> dict:
    up = ws.require("embed", "embeddings")
    e = cfg.eval
    reports = []
    for v in _selected(cfg, variant):
        names = [(v, seed, f"{run_key(v, seed)}.csv") for seed in cfg.model.seeds]
        if v == "double_fusion":
            names += [(f"{v}@{UNTRAINED}", seed, f"{UNTRAINED}-{run_key(v, seed)}.csv")
                      for seed in cfg.model.seeds]
        for label, seed, name in names:
            data = _load_embedding_file(ws, name)
            k = e.k or len(np.unique(data.labels))
            learners = e.learners if not label.endswith(UNTRAINED) else ()
            rep = evalkit.evaluate(data, label, learners, e.folds, seed, k)
            reports.append(rep)
            log(f"eval {label} s{seed}: " + ", ".join(f"{m}={x:.4f}" for m, x in
                                                      rep.clustering.items()))
    records = [r for rep in reports for r in rep.records()]
    files = {"report.csv": evalkit.format_records(records),
             "report.txt": evalkit.format_table([r for r in reports if r.classification])
             + "\nclustering\n" + _clustering_table(reports)}
    return ws.write_outputs("eval", files, {"embed": up["outputs"]}, cfg.section_dict("eval"))


def _clustering_table(reports) -> str:
    lines = ["variant,seed,db,nmi,ari"]
    for r in reports:
        c = r.clustering
        lines.append(f"{r.variant},{r.seed},{c['db']:.6f},{c['nmi']:.6f},{c['ari']:.6f}")
    return "\n".join(lines) + "\n"


def load_reports(ws: Workspace) -> list[tuple[str, str, float, int]]:
    ws.require("eval", "evaluation reports")
    return evalkit.parse_records((ws.stage_dir("eval") / "report.csv").read_text())


def compare_variants(cfg: ExperimentConfig, ws: Workspace, log=print) -> str:
    """Ranking over the configured variants, per learner, by mean ACC over seeds."""
    variants = cfg.model.variants
    if len(variants) < 2:
        raise ConfigError("compare needs at least two variants")
    emb_man = ws.read_manifest("embed")
    if emb_man is None:
        raise MissingArtifact("missing embeddings, run embed")
    for v in variants:
        for seed in cfg.model.seeds:
            name = f"{run_key(v, seed)}.csv"
            if name not in emb_man["outputs"]:
                raise MissingArtifact(f"missing embeddings for variant {v} ({name}), run embed")
    records = load_reports(ws)
    lines = []
    for learner in cfg.eval.learners:
        for metric in ("acc", "macro_f1"):
            means = []
            for v in variants:
                vals = [val for (rv, m, val, _) in records if rv == v and m == f"{learner}.{metric}"]
                if not vals:
                    raise MissingArtifact(f"no {learner}.{metric} records for {v}, run eval")
                means.append((v, float(np.mean(vals))))
            means.sort(key=lambda kv: (-kv[1], kv[0]))
            lines.append(f"{learner}.{metric}: " + " > ".join(f"{v} ({x:.4f})" for v, x in means))
    text = "\n".join(lines) + "\n"
    ws.stage_dir("eval").mkdir(parents=True, exist_ok=True)
    atomic_write(ws.stage_dir("eval") / "ranking.txt", text)
    log(text.rstrip())
    return text


def run_stage(stage: str, cfg: ExperimentConfig, variant: str | None = None, log=print):
    ws = Workspace(cfg.workspace)
    with ws.lock():
        if stage == "gen":
            return stage_gen(cfg, ws, log)
        if stage == "featurize":
            return stage_featurize(cfg, ws, log)
        if stage == "pretrain":
            return stage_pretrain(cfg, ws, log)
        if stage == "train":
            return stage_train(cfg, ws, variant, log)
        if stage == "embed":
            return stage_embed(cfg, ws, variant, log)
        if stage == "eval":
            return stage_eval(cfg, ws, variant, log)
        if stage == "compare":
            return compare_variants(cfg, ws, log)
        if stage == "all":
            stage_gen(cfg, ws, log)
            stage_featurize(cfg, ws, log)
            stage_pretrain(cfg, ws, log)
            stage_train(cfg, ws, variant, log)
            stage_embed(cfg, ws, variant, log)
            out = stage_eval(cfg, ws, variant, log)
            if variant is None and len(cfg.model.variants) >= 2:
                compare_variants(cfg, ws, log)
            return out
    raise ConfigError(f"unknown stage {stage!r}")
