import copy

import pytest

from mdmt.config import preset


def tiny_config_dict(tmp_path=None, epochs=2) -> dict:
    """desk_default shrunk to 8x8x8 volumes and a handful of patients."""
    cfg = preset("desk_default")
    for key, n in (("domain1", 14), ("domain2", 8)):
        cfg["domains"][key].update({"n_patients": n, "shape": [8, 8, 8], "blob_count": [1, 1],
                                    "blob_radius": [1.0, 1.5], "distractor_count": [0, 0]})
    cfg["splits"]["domain1"]["fractions"] = [0.5, 0.25, 0.25]
    cfg["splits"]["domain2"]["fractions"] = [0.5, 0.25, 0.25]
    cfg["arch"].update({"input_shape": [8, 8, 8], "base_channels": 2, "growth": 2, "fc_hidden": 4})
    cfg["train"].update({"epochs": epochs, "warmup_epochs": 1, "batch_size": 4})
    cfg["seeds"] = [0]
    if tmp_path is not None:
        cfg["output_dir"] = str(tmp_path / "out")
    return copy.deepcopy(cfg)


@pytest.fixture
def tiny_dict(tmp_path):
    return tiny_config_dict(tmp_path)


# one line per acceptance criterion, printed at the end of the session
ACCEPTANCE: dict[int, str] = {}


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(ACCEPTANCE):
        terminalreporter.write_line(ACCEPTANCE[n])
