from __future__ import annotations

import json

import pytest

from dtnerf.config import RunConfig, from_dict
from dtnerf.synth import SceneParams, gen_dataset, load_dataset

TINY = {
    "data": {"n_frames": 20, "resolution": 16, "steps_per_ray": 256},
    "schedule": {"coarse_steps": 20, "fine_steps": 6, "rays_per_step": 64, "eval_frames": 1},
    "loss": {"patch_size": 8},
    "render": {"n_samples_train": 16, "n_samples_eval": 16},
}

# criterion number -> (passed, detail); filled by test_acceptance, printed at the end of the session
ACCEPTANCE: dict[int, tuple[bool, str]] = {}


@pytest.fixture(scope="session")
def tiny_cfg() -> RunConfig:
    return from_dict(TINY)


@pytest.fixture(scope="session")
def tiny_config_file(tmp_path_factory, tiny_cfg):
    path = tmp_path_factory.mktemp("cfg") / "tiny.json"
    path.write_text(json.dumps(TINY))
    return path


@pytest.fixture(scope="session")
def tiny_data_dir(tmp_path_factory, tiny_cfg):
    d = tiny_cfg.data
    out = tmp_path_factory.mktemp("tiny") / "ds"
    gen_dataset(SceneParams(), d.n_frames, d.resolution, d.orbit_deg, d.seed, out, d.steps_per_ray)
    return out


@pytest.fixture(scope="session")
def tiny_data(tiny_data_dir):
    return load_dataset(tiny_data_dir)


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(ACCEPTANCE):
        ok, detail = ACCEPTANCE[n]
        terminalreporter.write_line(f"criterion {n}: {'PASS' if ok else 'FAIL'}  {detail}")
