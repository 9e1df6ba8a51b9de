import numpy as np
import pytest

from mapseg.synth import SynthSpec, generate_tiles


def naive_erode(mask, k):
    """O(H W k^2) window scan; pixels outside the image count as 0."""
    mask = np.asarray(mask).astype(bool)
    h, w = mask.shape
    r = k // 2
    out = np.zeros((h, w), dtype=np.uint8)
    for i in range(h):
        for j in range(w):
            if i - r < 0 or j - r < 0 or i + r >= h or j + r >= w:
                continue
            out[i, j] = mask[i - r:i + r + 1, j - r:j + r + 1].all()
    return out


def naive_iou(a, b, empty=1.0):
    sa = {tuple(p) for p in np.argwhere(a)}
    sb = {tuple(p) for p in np.argwhere(b)}
    union = sa | sb
    if not union:
        return empty
    return len(sa & sb) / len(union)


@pytest.fixture(scope="session")
def synth_tiles():
    return [st.tile for st in generate_tiles(SynthSpec(seed=0))]


@pytest.fixture(scope="session")
def synth_dir(tmp_path_factory):
    from mapseg.synth import synth_dataset

    root = tmp_path_factory.mktemp("synth")
    synth_dataset(SynthSpec(seed=0), root)
    return root


def pytest_terminal_summary(terminalreporter):
    import sys

    mod = sys.modules.get("test_acceptance")
    results = getattr(mod, "RESULTS", None)
    if not results:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(results):
        ok, detail = results[n]
        terminalreporter.write_line(f"criterion {n}: {'PASS' if ok else 'FAIL'} ({detail})")
