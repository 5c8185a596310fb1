import numpy as np
import pandas as pd
import pytest

from railpanel.panel import PanelDataset


def make_panel(rows, outcomes=("y",), covariates=(), clusters=("county",)):
    """Build a panel from ``(unit, year, treatment_year, y, ...)`` tuples."""
    cols = ["unit_id", "year", "treatment_year", *outcomes]
    df = pd.DataFrame(rows, columns=cols)
    df["lat"] = 56.0
    df["lon"] = 10.0
    for c in covariates:
        df[c] = 0.0
    if "county" in clusters:
        df["county"] = "c1"
    return PanelDataset(df, outcomes, covariates, clusters)


@pytest.fixture
def rng():
    return np.random.default_rng(20240611)


def random_panel(rng, n_units, periods, never_share=0.4, missing=0.0, n_counties=3):
    """Balanced random panel with staggered cohorts on ``periods``."""
    periods = list(periods)
    cohorts = [None] + periods[1:]
    p = [never_share] + [(1 - never_share) / (len(cohorts) - 1)] * (len(cohorts) - 1)
    rows = []
    for i in range(n_units):
        g = cohorts[rng.choice(len(cohorts), p=p)]
        lat, lon = rng.uniform(54.6, 57.7), rng.uniform(8.1, 12.6)
        county = f"c{rng.integers(n_counties)}"
        a = rng.normal()
        x1 = rng.normal()
        for k, t in enumerate(periods):
            y = a + 0.3 * k + rng.normal() + (0.5 if g is not None and t >= g else 0.0)
            if missing and rng.random() < missing:
                y = np.nan
            rows.append((f"u{i:03d}", t, np.nan if g is None else g, lat, lon, county, y, x1))
    df = pd.DataFrame(rows, columns=["unit_id", "year", "treatment_year", "lat", "lon",
                                     "county", "y", "x1"])
    return PanelDataset(df, ("y",), ("x1",), ("county",))
