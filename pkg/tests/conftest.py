import numpy as np
import pytest

from occtext.backbone import ToyBackboneScript, build_toy_backbone
from occtext.core import DEFAULT_SITES, Rect, Scenario, TokenGrid, build_schedule

GRID = TokenGrid(8, 8)


def make_scenario(**overrides):
    fields = dict(
        scenario_id="poster",
        base_prompt='a poster reading "COFFEE"',
        edit_prompt='a poster reading "COFFEE" behind a vinyl record',
        target_text="COFFEE",
        layout_rect=Rect(0.1, 0.375, 0.9, 0.625),
        text_token_indices=(3,),
        occluder_token_indices=(10, 11),
        seed=0,
        anchor_strength=0.5,
        anchor_fraction=0.5,
        occluder_phrase="vinyl record",
    )
    fields.update(overrides)
    return Scenario(**fields)


def band_script(rect=(0.1, 0.375, 0.9, 0.625), bump=(0.5, 0.5), sigma=0.8, blend=1.0, grid=GRID):
    return ToyBackboneScript.from_specs(
        [
            {"tokens": [3], "shape": "rect", "rect": list(rect)},
            {"tokens": [10, 11], "shape": "gaussian", "center": list(bump), "sigma": sigma},
        ],
        grid,
        blend,
    )


def toy(script=None, num_sites=57, channels=16, seed=0, grid=GRID, **kw):
    return build_toy_backbone(grid, channels, 16, num_sites, 2, script, seed, **kw)


@pytest.fixture
def grid():
    return GRID


@pytest.fixture
def scenario():
    return make_scenario()


@pytest.fixture(scope="session")
def adapter():
    return toy(band_script())


@pytest.fixture
def schedule():
    return build_schedule()


@pytest.fixture
def sites():
    return DEFAULT_SITES


def dft_lowpass_oracle(field2d: np.ndarray, keep_fraction: float) -> np.ndarray:
    """Low-pass by explicit DFT matrices (no FFT), same radial cutoff rule."""
    h, w = field2d.shape
    fh = np.exp(-2j * np.pi * np.outer(np.arange(h), np.arange(h)) / h)
    fw = np.exp(-2j * np.pi * np.outer(np.arange(w), np.arange(w)) / w)
    spec = fh @ field2d @ fw.T
    ky = np.array([k if k < h - k else k - h for k in range(h)]) / h
    kx = np.array([k if k < w - k else k - w for k in range(w)]) / w
    # aliased -N/2 and +N/2 have the same magnitude so the sign convention is irrelevant
    r = np.sqrt(ky[:, None] ** 2 + kx[None, :] ** 2) / np.sqrt(0.5)
    spec = np.where(r <= keep_fraction + 1e-12, spec, 0)
    return (np.conj(fh) @ spec @ np.conj(fw).T).real / (h * w)


def levenshtein_oracle(a: str, b: str) -> int:
    """Full-matrix Wagner-Fischer edit distance."""
    d = [[0] * (len(b) + 1) for _ in range(len(a) + 1)]
    for i in range(len(a) + 1):
        d[i][0] = i
    for j in range(len(b) + 1):
        d[0][j] = j
    for i in range(1, len(a) + 1):
        for j in range(1, len(b) + 1):
            d[i][j] = min(d[i - 1][j] + 1, d[i][j - 1] + 1, d[i - 1][j - 1] + (a[i - 1] != b[j - 1]))
    return d[len(a)][len(b)]


def raster_overlap_oracle(r_occ, r_text, res: int) -> float:
    """occ_align by counting pixel centers of a res x res raster."""
    c = (np.arange(res) + 0.5) / res
    xx, yy = np.meshgrid(c, c)

    def paint(r):
        return (xx >= r.left) & (xx < r.right) & (yy >= r.top) & (yy < r.bottom)

    a, b = paint(r_occ), paint(r_text)
    inter = np.count_nonzero(a & b)
    if inter == 0:
        return 0.0
    return float(np.sqrt((inter / a.sum()) * (inter / b.sum())))


# (name, passed, detail) rows filled in by test_acceptance.py
ACCEPTANCE: list[tuple[str, bool, str]] = []


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for name, ok, detail in ACCEPTANCE:
        terminalreporter.write_line(f"{'PASS' if ok else 'FAIL'}  {name}: {detail}")
