import csv
import sys
from datetime import datetime, timezone
from pathlib import Path

import numpy as np
import pytest

sys.path.insert(0, str(Path(__file__).parent))

from nowcast.constants import STATIONS, VARIABLES  # noqa: E402
from nowcast.storage import save_arrays  # noqa: E402
from nowcast.synthetic import SynthConfig, generate_synthetic_corpus  # noqa: E402

STEP = 300


def ts(text):
    return int(datetime.strptime(text, "%Y-%m-%d %H:%M").replace(tzinfo=timezone.utc).timestamp())


def striped_frame(columns_of_64, value=100):
    """Raw 288x288 uint16 frame whose resized grid has exactly ``columns_of_64`` rainy columns (even counts)."""
    assert columns_of_64 % 2 == 0
    raw = np.zeros((288, 288), dtype=np.uint16)
    raw[:, : 9 * columns_of_64 // 2] = value
    return raw


def write_corpus(root, days, skip_station_times=(), seed=0):
    """Hand-built corpus.

    ``days`` maps a start time string to a list of rainy-column counts, one
    per 5-minute frame. Station records cover every 10 minutes of each day
    except ``skip_station_times``.
    """
    root = Path(root)
    rng = np.random.default_rng(seed)
    rows = []
    skip = {ts(s) for s in skip_station_times}
    for start, cols in days.items():
        t0 = ts(start)
        times = t0 + STEP * np.arange(len(cols), dtype=np.int64)
        frames = np.stack([striped_frame(c) for c in cols])
        day = datetime.fromtimestamp(t0, tz=timezone.utc).strftime("%Y%m%d")
        save_arrays(root / "radar" / f"{day}.npz", timestamps=times, frames=frames)
        for t in range(t0 - t0 % 600, int(times[-1]) + 1, 600):
            if t in skip:
                continue
            stamp = datetime.fromtimestamp(t, tz=timezone.utc).strftime("%Y-%m-%dT%H:%M")
            for sid, _, _ in STATIONS:
                rows.append([stamp, sid, *(f"{v:.3f}" for v in rng.normal(size=len(VARIABLES)))])
    (root / "stations").mkdir(parents=True, exist_ok=True)
    with open(root / "stations" / "stations.csv", "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(["station_id", "lat", "lon"])
        w.writerows([[s, la, lo] for s, la, lo in STATIONS])
    with open(root / "stations" / "observations.csv", "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(["timestamp", "station_id", *VARIABLES])
        w.writerows(rows)
    return root


TINY = SynthConfig(seed=7, days_per_year=1, hours_per_day=2)


@pytest.fixture(scope="session")
def tiny_corpus(tmp_path_factory):
    root = tmp_path_factory.mktemp("tiny_corpus")
    generate_synthetic_corpus(TINY, root)
    return root


ACCEPTANCE = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE:
            terminalreporter.write_line(line)
