"""Versioned JSON model artifacts.

Floats are written with ``repr`` precision, so ``load(save(m))`` restores every
parameter bit for bit and save -> load -> save is byte-identical.
"""
from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np

from . import network, nn
from .cohort import task_info
from .errors import CompatibilityError, CorruptArtifactError, ParameterError
from .estimators import HybridModel, make_network
from .features import SD_FLOOR, Normalizer, PcaModel, SequenceFeaturizer
from .fileio import dumps, write_json

FORMAT_VERSION = 1


@dataclass
class ModelArtifact:
    model: HybridModel
    task: str
    seed: int = 0
    config_digest: str = ""
    config: dict = field(default_factory=dict)


def _arr(a):
    a = np.asarray(a, dtype=np.float64)
    return {"shape": list(a.shape), "data": a.ravel().tolist()}


def _unarr(d, name):
    try:
        shape = tuple(int(s) for s in d["shape"])
        data = np.array(d["data"], dtype=np.float64)
    except (KeyError, TypeError, ValueError) as exc:
        raise CorruptArtifactError(f"{name}: malformed array ({exc})") from None
    if data.size != int(np.prod(shape)):
        raise CorruptArtifactError(f"{name}: {data.size} values for shape {shape}")
    if not np.all(np.isfinite(data)):
        raise CorruptArtifactError(f"{name}: non-finite values")
    return data.reshape(shape)


def _norm(n):
    return {"labels": list(n.labels), "mean": _arr(n.mean), "scale": _arr(n.scale)}


def artifact_to_dict(art):
    m = art.model
    f, net = m.featurizer, m.net
    arch = net.arch_
    net_d = {
        "params": {k: _arr(v) for k, v in sorted(net.params_.items())},
        "bn_stats": None,
    }
    if net.bn_stats_ is not None:
        s = net.bn_stats_
        net_d["bn_stats"] = {
            "running_mean": _arr(s.running_mean),
            "running_var": _arr(s.running_var),
            "eps": s.eps,
            "momentum": s.momentum,
        }
    if arch.task == "regression":
        net_d["target"] = {"mean": net.y_mean_, "scale": net.y_scale_}
    else:
        net_d["threshold"] = float(net.threshold)
    return {
        "format_version": FORMAT_VERSION,
        "task": art.task,
        "task_kind": arch.task,
        "variant": arch.variant,
        "seed": art.seed,
        "config_digest": art.config_digest,
        "config": art.config,
        "architecture": {"hidden": arch.hidden, "n_pca": arch.n_pca, "seq_len": arch.seq_len},
        "featurizer": {
            "seq_mean": f.seq_mean_,
            "seq_scale": f.seq_scale_,
            "pca": {
                "mean": _arr(f.pca_.mean),
                "components": _arr(f.pca_.components),
                "explained_variance": _arr(f.pca_.explained_variance),
                "explained_ratio": _arr(f.pca_.explained_ratio),
                "total_variance": f.pca_.total_variance,
            },
            "pca_scaler": _norm(f.pca_scaler_),
            "basic_scaler": _norm(f.basic_scaler_),
        },
        "network": net_d,
    }


def _load_norm(d, name, width):
    n = Normalizer(_unarr(d["mean"], name + ".mean"), _unarr(d["scale"], name + ".scale"), tuple(d["labels"]))
    if n.mean.shape != (width,) or n.scale.shape != (width,):
        raise CorruptArtifactError(f"{name}: expected {width} features")
    if np.any(n.scale < SD_FLOOR):
        raise CorruptArtifactError(f"{name}: scale below floor {SD_FLOOR}")
    return n


def artifact_from_dict(d):
    if not isinstance(d, dict) or "format_version" not in d:
        raise CorruptArtifactError("not a model artifact")
    if d["format_version"] != FORMAT_VERSION:
        raise CompatibilityError(f"artifact format {d['format_version']} != supported {FORMAT_VERSION}")
    try:
        task = d["task"]
        kind = task_info(task)[1]
        if d["task_kind"] != kind:
            raise CorruptArtifactError(f"task kind {d['task_kind']!r} does not match task {task!r}")
        a = d["architecture"]
        arch = network.Architecture(d["variant"], kind, int(a["hidden"]), int(a["n_pca"]), int(a["seq_len"]))
        fd = d["featurizer"]
        pd = fd["pca"]
        pca = PcaModel(
            mean=_unarr(pd["mean"], "pca.mean"),
            components=_unarr(pd["components"], "pca.components"),
            explained_variance=_unarr(pd["explained_variance"], "pca.explained_variance"),
            explained_ratio=_unarr(pd["explained_ratio"], "pca.explained_ratio"),
            total_variance=float(pd["total_variance"]),
        )
        _check_pca(pca, arch)
        feat = SequenceFeaturizer(arch.n_pca, arch.seq_len)
        feat.seq_mean_ = float(fd["seq_mean"])
        feat.seq_scale_ = float(fd["seq_scale"])
        if not np.isfinite(feat.seq_mean_) or not feat.seq_scale_ >= SD_FLOOR:
            raise CorruptArtifactError("sequence scaler is invalid")
        feat.pca_ = pca
        feat.pca_scaler_ = _load_norm(fd["pca_scaler"], "pca_scaler", arch.n_pca)
        feat.basic_scaler_ = _load_norm(fd["basic_scaler"], "basic_scaler", network.N_BASIC)

        nd = d["network"]
        params = {k: _unarr(v, k) for k, v in nd["params"].items()}
        try:
            network.check_params(arch, params)
        except ParameterError as exc:
            raise CorruptArtifactError(str(exc)) from None
        reference = network.init_params(arch, np.random.default_rng(0))
        for k, v in reference.items():
            if params[k].shape != v.shape:
                raise CorruptArtifactError(f"parameter {k} has shape {params[k].shape}, expected {v.shape}")
        stats = None
        if arch.cell:
            sd = nd["bn_stats"]
            if sd is None:
                raise CorruptArtifactError("recurrent variant without batch-norm statistics")
            stats = nn.BatchNormStats(
                _unarr(sd["running_mean"], "bn.running_mean"),
                _unarr(sd["running_var"], "bn.running_var"),
                float(sd["eps"]),
                float(sd["momentum"]),
            )
            if stats.running_mean.shape != (arch.hidden,) or stats.running_var.shape != (arch.hidden,):
                raise CorruptArtifactError("batch-norm statistics have the wrong width")
            if np.any(stats.running_var < 0):
                raise CorruptArtifactError("batch-norm running variance is negative")
        net = make_network(
            arch.variant, kind, hidden_size=arch.hidden, n_components=arch.n_pca, seq_len=arch.seq_len,
            threshold=float(nd.get("threshold", 0.5)), random_state=int(d.get("seed", 0)),
        )
        net.arch_ = arch
        net.params_ = params
        net.bn_stats_ = stats
        if kind == "regression":
            net.y_mean_ = float(nd["target"]["mean"])
            net.y_scale_ = float(nd["target"]["scale"])
        else:
            net.classes_ = np.array([0, 1])
    except (KeyError, TypeError) as exc:
        raise CorruptArtifactError(f"missing or malformed field: {exc}") from None
    except ParameterError as exc:
        raise CorruptArtifactError(str(exc)) from None
    return ModelArtifact(HybridModel(feat, net), task, int(d.get("seed", 0)), d.get("config_digest", ""),
                         d.get("config", {}))


def _check_pca(pca, arch):
    k, T = arch.n_pca, arch.seq_len
    if pca.mean.shape != (T,) or pca.components.shape != (k, T):
        raise CorruptArtifactError(f"PCA shapes {pca.mean.shape}/{pca.components.shape} do not match k={k}, T={T}")
    gram = pca.components @ pca.components.T
    if np.max(np.abs(gram - np.eye(k))) >= 1e-8:
        raise CorruptArtifactError("PCA components are not orthonormal")
    ev = pca.explained_variance
    if ev.shape != (k,) or np.any(ev < 0) or np.any(np.diff(ev) > 0):
        raise CorruptArtifactError("PCA explained variance must be non-negative and non-increasing")
    if pca.explained_ratio.shape != (k,) or pca.explained_ratio.sum() > 1 + 1e-8:
        raise CorruptArtifactError("PCA explained ratios sum above 1")


def save_model(artifact, path):
    write_json(path, artifact_to_dict(artifact))


def dump_model(artifact):
    return dumps(artifact_to_dict(artifact))


def load_model(path):
    with open(path, encoding="utf-8") as fh:
        try:
            d = json.load(fh)
        except json.JSONDecodeError as exc:
            raise CorruptArtifactError(f"invalid JSON: {exc}") from None
    return artifact_from_dict(d)
