import json

import pytest

from phtrans import pipeline as P

# Small enough that a full teacher -> pseudo -> students -> eval run takes seconds.
MINI = {
    "teacher": {"preset": "tiny", "overrides": {"num_classes": 5, "input_shape": [16, 16, 16]}},
    "coarse": {"preset": "tiny", "overrides": {}},
    "fine": {"preset": "tiny", "overrides": {"num_classes": 5, "input_shape": [16, 16, 16]}},
    "teacher_train": {"patch_size": [16, 16, 16], "epochs": 2, "steps_per_epoch": 2, "lr_init": 0.003},
    "coarse_train": {"patch_size": [8, 8, 8], "epochs": 2, "steps_per_epoch": 2, "lr_init": 0.003},
    "fine_train": {"patch_size": [16, 16, 16], "epochs": 2, "steps_per_epoch": 2, "lr_init": 0.003},
    "teacher_grid": [32, 32, 32],
}


@pytest.fixture(scope="session")
def mini_config_dict():
    return json.loads(json.dumps(MINI))


@pytest.fixture(scope="session")
def mini_config():
    return P.PipelineConfig.from_dict(json.loads(json.dumps(MINI)))


@pytest.fixture(scope="session")
def mini_data(tmp_path_factory):
    root = tmp_path_factory.mktemp("phantoms")
    return P.make_phantom_dataset(root, n_labeled=3, n_unlabeled=2, n_val=2, shape=(32, 32, 32), seed=1)


@pytest.fixture(scope="session")
def mini_run(tmp_path_factory, mini_data, mini_config):
    out = tmp_path_factory.mktemp("run")
    return P.run_selftrain(mini_data, mini_config, out)


def pytest_terminal_summary(terminalreporter):
    import sys
    mod = sys.modules.get("test_acceptance")
    if mod is None or not mod.RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(mod.RESULTS):
        terminalreporter.write_line(mod.RESULTS[n])
