"""Cached desk-scale training runs for the acceptance suite.

Runs are keyed by the resolved run config, the seed and a hash of the
package sources, so editing any module retrains.  The cache lives in
``.acceptance_cache`` at the repository root unless
``WMDISTILL_ACCEPTANCE_CACHE`` points elsewhere.

    python tests/desk_runs.py      # train everything ahead of pytest
"""
from __future__ import annotations

import hashlib
import json
import os
import sys
import time
from pathlib import Path

ROOT = Path(__file__).resolve().parents[1]
CONFIGS = ROOT / "configs"
CACHE = Path(os.environ.get("WMDISTILL_ACCEPTANCE_CACHE", ROOT / ".acceptance_cache"))

DISTILL_SEEDS = (0, 1, 2)
EVAL_ATTACKS = ("ND", "GN", "AS", "LP", "EA")
EVAL_CLIPS = 100
EVAL_SECONDS = 1.0
EVAL_SEED = 2024  # disjoint from every training corpus seed


def source_hash() -> str:
    h = hashlib.sha256()
    for path in sorted((ROOT / "src" / "wmdistill").rglob("*.py")):
        h.update(path.relative_to(ROOT).as_posix().encode())
        h.update(path.read_bytes())
    return h.hexdigest()


def _key(*parts) -> str:
    blob = json.dumps(parts, sort_keys=True, default=str) + source_hash()
    return hashlib.sha256(blob.encode()).hexdigest()[:16]


def load(name: str, *overrides: str):
    from wmdistill.config import load_config

    return load_config(CONFIGS / name, list(overrides))


def _cached(tag: str, cfg, run) -> tuple[Path, dict]:
    out = CACHE / f"{tag}-{_key(tag, cfg.to_dict())}"
    done = out / "done.json"
    if done.is_file():
        return out, json.loads(done.read_text())
    out.mkdir(parents=True, exist_ok=True)
    t0 = time.process_time()
    w0 = time.perf_counter()
    ckpt = run(out)
    info = {"checkpoint": str(ckpt), "cpu_seconds": time.process_time() - t0,
            "wall_seconds": time.perf_counter() - w0}
    done.write_text(json.dumps(info, indent=2))
    return out, info


def teacher() -> tuple[Path, dict]:
    from wmdistill.training import train_teacher

    cfg = load("desk_teacher.json")
    return _cached("teacher", cfg, lambda out: train_teacher(cfg, out).checkpoint)


def student(seed: int, direct: bool) -> tuple[Path, dict]:
    from wmdistill.training import direct_distill_baseline, distill_student

    t_dir, t_info = teacher()
    cfg = load("desk_student.json", f"seed={seed}")
    fn = direct_distill_baseline if direct else distill_student
    tag = ("dkd" if direct else "pkd") + f"-s{seed}"
    return _cached(tag + "-" + Path(t_dir).name, cfg, lambda out: fn(t_info["checkpoint"], cfg, out).checkpoint)


def eval_clips():
    import numpy as np

    from wmdistill.corpus import CorpusSpec, generate_corpus

    spec = CorpusSpec(n_clips=EVAL_CLIPS, clip_seconds=EVAL_SECONDS, splits=(1.0, 0.0, 0.0))
    return np.stack([c.samples for c in generate_corpus(spec, EVAL_SEED)])


if __name__ == "__main__":
    sys.path.insert(0, str(ROOT / "src"))
    d, info = teacher()
    print("teacher", d, info, flush=True)
    for s in DISTILL_SEEDS:
        for direct in (False, True):
            print("student", s, direct, *student(s, direct), flush=True)
