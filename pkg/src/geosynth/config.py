"""TOML configuration with a fully-specified defaults table.

Sections: [scene], [geometry], [sampler], [renderer], [train], [eval].
CLI flags override file values; the resolved table is fingerprinted so a
report can name the exact configuration that produced it.
"""

import copy
import hashlib
import json
import sys
from pathlib import Path

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib


class ConfigError(Exception):
    pass


DEFAULTS = {
    "scene": {
        "kind": "plane_sphere",        # plane_sphere | two_plane | custom
        "background": [0.05, 0.05, 0.08],
        "ambient": 0.35,
        "light_dir": [0.3, -0.5, 0.8],
        "gloss": 0.0,
        "gloss_exponent": 32.0,
        "seed": 0,
        "rig": "arc",
        "n_views": 12,
        "width": 80,
        "height": 64,
        "focal": 90.0,
        "radius": 4.0,
        "span_deg": 40.0,
        "elevation_deg": 8.0,
        "near": 2.0,
        "far": 7.0,
        "target": [0.0, 0.0, 4.0],
        "no_depth": False,
        "primitives": [],              # optional explicit primitive table
    },
    "geometry": {
        "planes": [8, 32, 48],         # D  per level 0,1,2
        "groups": 8,
        "nearby_k_min": 3,
        "nearby_k_max": 5,
        "nearby_k_eval": 5,
        "rgbd": False,
        "rgbd_drop": 0.3,
    },
    "sampler": {
        "n_coarse": 96,
        "n_fine": 32,
        "occlusion_slack": 0.01,
    },
    "renderer": {
        "delta_weighted": False,
        "chunk_rays": 128,
        "eval_chunk": 1024,
    },
    "train": {
        "iterations": 3000,
        "rays_per_batch": 512,
        "lr": 5e-4,
        "lr_finetune": 2e-4,
        "mode": "generalizable",
        "v_train": 6,
        "lambda_gt": 1.0,
        "lambda_pseudo": 0.1,
        "eps_c": 0.1,
        "eps_t": 1e-4,
        "seed": 0,
        "scale_aug": True,
        "use_occlusion_masks": True,
        "use_selfsup": True,
        "checkpoint_every": 1000,
        "log_every": 25,
    },
    "eval": {
        "v_eval": 9,
        "seed": 0,
    },
}


def load_config(path=None, overrides=None):
    """Resolved config: defaults, updated by the TOML file, then by overrides."""
    cfg = copy.deepcopy(DEFAULTS)
    if path is not None:
        with open(path, "rb") as fh:
            try:
                user = tomllib.load(fh)
            except tomllib.TOMLDecodeError as e:
                raise ConfigError(f"bad TOML in {path}: {e}") from None
        for section, values in user.items():
            if section not in cfg:
                raise ConfigError(f"unknown config section [{section}]")
            if not isinstance(values, dict):
                raise ConfigError(f"section [{section}] must be a table")
            for key, val in values.items():
                if key not in cfg[section]:
                    raise ConfigError(f"unknown key {key!r} in [{section}]")
                cfg[section][key] = val
    for dotted, val in (overrides or {}).items():
        section, key = dotted.split(".", 1)
        if section not in cfg or key not in cfg[section]:
            raise ConfigError(f"unknown override {dotted!r}")
        cfg[section][key] = val
    return cfg


def fingerprint(cfg):
    """Stable short hash of the resolved configuration."""
    blob = json.dumps(cfg, sort_keys=True, separators=(",", ":")).encode()
    return hashlib.sha256(blob).hexdigest()[:16]


def build_scene(cfg):
    """SceneSpec + RigSpec from the [scene] table."""
    from .scenes import PlanePrimitive, RigSpec, SceneSpec, SpherePrimitive, Texture

    s = cfg["scene"]
    prims = []
    if s["primitives"]:
        for p in s["primitives"]:
            tex = Texture(p.get("texture", "sine"), tuple(p.get("color", (0.9, 0.8, 0.7))),
                          tuple(p.get("freq", (0.8, 0.8))), p.get("contrast", 0.8))
            if p["type"] == "plane":
                prims.append(PlanePrimitive(tuple(p["center"]), tuple(p.get("axis_a", (1, 0, 0))),
                                            tuple(p.get("axis_b", (0, 1, 0))),
                                            p.get("half_a", 4.0), p.get("half_b", 4.0), tex,
                                            p.get("gloss", s["gloss"]), s["gloss_exponent"]))
            elif p["type"] == "sphere":
                prims.append(SpherePrimitive(tuple(p["center"]), p["radius"], tex,
                                             p.get("gloss", s["gloss"]), s["gloss_exponent"]))
            else:
                raise ConfigError(f"unknown primitive type {p['type']!r}")
    elif s["kind"] == "plane_sphere":
        cx, cy, cz = s["target"]
        prims = [
            PlanePrimitive((cx, cy, cz + 0.9), (1, 0, 0), (0, 1, 0), 8.0, 8.0,
                           Texture("sine", (0.95, 0.8, 0.6), (0.9, 0.7), 0.9),
                           s["gloss"], s["gloss_exponent"]),
            PlanePrimitive((cx - 0.55, cy + 0.25, cz - 0.15), (1, 0, 0.45), (0, 1, 0), 0.75, 0.55,
                           Texture("checker", (0.55, 0.85, 0.95), (2.2, 2.2), 0.85),
                           s["gloss"], s["gloss_exponent"]),
            SpherePrimitive((cx + 0.55, cy - 0.25, cz - 0.3), 0.5,
                            Texture("sine", (0.85, 0.55, 0.9), (1.4, 1.1), 0.85),
                            s["gloss"], s["gloss_exponent"]),
        ]
    elif s["kind"] == "two_plane":
        cx, cy, cz = s["target"]
        prims = [
            PlanePrimitive((cx, cy, cz + 1.0), (1, 0, 0), (0, 1, 0), 8.0, 8.0,
                           Texture("sine", (0.9, 0.8, 0.65), (1.1, 0.9), 0.9)),
            PlanePrimitive((cx, cy, cz - 1.0), (1, 0, 0), (0, 1, 0), 0.8, 0.8,
                           Texture("checker", (0.6, 0.9, 0.75), (2.5, 2.5), 0.9)),
        ]
    else:
        raise ConfigError(f"unknown scene kind {s['kind']!r}")
    scene = SceneSpec(prims, tuple(s["background"]), tuple(s["light_dir"]), s["ambient"],
                      s["seed"])
    rig = RigSpec(s["rig"], tuple(s["target"]), s["radius"], s["span_deg"], s["elevation_deg"],
                  s["focal"], s["width"], s["height"], s["near"], s["far"])
    return scene, rig


def train_config(cfg, mode=None):
    """TrainConfig assembled from the resolved table."""
    from .train import TrainConfig

    t = cfg["train"]
    g = cfg["geometry"]
    mode = mode or t["mode"]
    lr = t["lr_finetune"] if mode == "finetune" else t["lr"]
    return TrainConfig(
        iterations=t["iterations"], rays_per_batch=t["rays_per_batch"], lr=lr, mode=mode,
        v_train=t["v_train"], v_eval=cfg["eval"]["v_eval"],
        n_coarse=cfg["sampler"]["n_coarse"], n_fine=cfg["sampler"]["n_fine"],
        nearby_k_min=g["nearby_k_min"], nearby_k_max=g["nearby_k_max"],
        lambda_gt=t["lambda_gt"], lambda_pseudo=t["lambda_pseudo"],
        eps_c=t["eps_c"], eps_t=t["eps_t"], seed=t["seed"], rgbd=g["rgbd"],
        rgbd_drop=g["rgbd_drop"], scale_aug=t["scale_aug"],
        use_occlusion_masks=t["use_occlusion_masks"], use_selfsup=t["use_selfsup"],
        planes=tuple(g["planes"]), checkpoint_every=t["checkpoint_every"],
        chunk_rays=cfg["renderer"]["chunk_rays"], log_every=t["log_every"])
