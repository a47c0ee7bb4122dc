"""Checkpoint directory: ``manifest.json`` plus one raw float64 payload.

The manifest records the experiment config, seed, class plan and, for every
parameter tensor, its hierarchical name, shape, frozen flag and byte range in
``params.bin`` (little-endian 64-bit floats, concatenated in manifest order).
"""
from __future__ import annotations

import json
from pathlib import Path

import numpy as np

from .config import ExperimentConfig, config_from_dict
from .errors import ValidationError
from .incremental import SessionPlan
from .model import PromptModel

FORMAT = "ttprompt-checkpoint/1"
PAYLOAD = "params.bin"


def save_checkpoint(out_dir, model: PromptModel, cfg: ExperimentConfig, seed: int,
                    plan: SessionPlan | None = None) -> Path:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    tensors, offset = [], 0
    with open(out / PAYLOAD, "wb") as fh:
        for name, p in model.named_params().items():
            raw = np.ascontiguousarray(p.value, dtype="<f8").tobytes()
            fh.write(raw)
            tensors.append({"name": name, "shape": list(p.value.shape), "frozen": bool(p.frozen),
                            "trainable": bool(p.trainable), "offset": offset, "nbytes": len(raw)})
            offset += len(raw)
    manifest = {
        "format": FORMAT,
        "seed": int(seed),
        "config": cfg.to_dict(),
        "config_hash": cfg.digest(),
        "view_dims": list(model.config.view_dims),
        "task_classes": [int(h["bias"].value.size) for h in model.heads],
        "plan": None if plan is None else {"C_base": plan.C_base, "C_inc": plan.C_inc,
                                           "class_sets": plan.class_sets},
        "tensors": tensors,
    }
    (out / "manifest.json").write_text(json.dumps(manifest, indent=2) + "\n")
    return out


def load_checkpoint(ckpt_dir):
    """Rebuild ``(model, cfg, seed, plan)`` from a checkpoint directory."""
    ckpt = Path(ckpt_dir)
    mpath = ckpt / "manifest.json"
    if not mpath.is_file():
        raise FileNotFoundError(f"checkpoint manifest not found: {mpath}")
    manifest = json.loads(mpath.read_text())
    if manifest.get("format") != FORMAT:
        raise ValidationError(f"{mpath}: unsupported checkpoint format {manifest.get('format')!r}")
    cfg = config_from_dict(manifest["config"])
    model = PromptModel(cfg.model_config(manifest["view_dims"]), np.random.default_rng(0))
    for n_classes in manifest["task_classes"]:
        model.add_task(n_classes)
    payload = (ckpt / PAYLOAD).read_bytes()
    named = model.named_params()
    listed = {t["name"] for t in manifest["tensors"]}
    if listed != set(named):
        missing, extra = sorted(set(named) - listed), sorted(listed - set(named))
        raise ValidationError(f"checkpoint tensors disagree with model: missing {missing}, unexpected {extra}")
    for t in manifest["tensors"]:
        p = named[t["name"]]
        shape = tuple(t["shape"])
        if shape != p.value.shape:
            raise ValidationError(f"{t['name']}: checkpoint shape {shape} != model shape {p.value.shape}")
        end = t["offset"] + t["nbytes"]
        if t["nbytes"] != 8 * int(np.prod(shape)) or end > len(payload):
            raise ValidationError(f"{t['name']}: payload range [{t['offset']}, {end}) is inconsistent")
        p.value = np.frombuffer(payload, dtype="<f8", count=int(np.prod(shape)),
                                offset=t["offset"]).astype(np.float64).reshape(shape)
        p.frozen = t["frozen"]
        p.trainable = t.get("trainable", p.trainable)
        p.reset_optimizer()
    plan = None
    if manifest.get("plan") is not None:
        pl = manifest["plan"]
        plan = SessionPlan([list(c) for c in pl["class_sets"]], pl["C_base"], pl["C_inc"])
    return model, cfg, manifest["seed"], plan
