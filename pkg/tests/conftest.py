import numpy as np
import pytest

from rfv.bank import AffordanceMask, BankEntry, HandTrajectory, Narration, VideoClip


def make_entry(eid="e1", text="pick up the cup", w=8, h=6, n_frames=3, indoor=True,
               embedding=None, features=None, seed=0, view=""):
    rng = np.random.default_rng(seed)
    frames = rng.integers(0, 256, size=(n_frames, h, w, 3), dtype=np.uint8)
    bm = np.zeros((h, w), dtype=np.uint8)
    bm[1:3, 2:5] = 1
    pts = np.array([[0, 1.0, 1.0], [1, 2.0, 2.5], [2, 3.0, 4.0]])[: max(2, min(3, n_frames))]
    return BankEntry(eid, Narration(text, indoor), VideoClip(f"clip-{eid}", frames, 30.0, view),
                     AffordanceMask.from_bitmap(bm, 0), HandTrajectory(pts, False),
                     embedding=embedding, frame_features=features)


@pytest.fixture
def entry_factory():
    return make_entry


# ---------------------------------------------------------------- acceptance report

ACCEPTANCE = pytest.StashKey[dict]()


class _Verdict:
    def __init__(self):
        self.ok = False
        self.detail = ""


@pytest.fixture
def criterion(request):
    """``with criterion(n, title) as v: ... v.ok = ...; v.detail = ...`` records one line."""
    lines = request.config.stash.setdefault(ACCEPTANCE, {})

    class _Ctx:
        def __init__(self, n, title):
            self.n, self.title, self.v = n, title, _Verdict()

        def __enter__(self):
            return self.v

        def __exit__(self, typ, exc, tb):
            if exc is not None:
                self.v.ok, self.v.detail = False, f"{typ.__name__}: {exc}"
            line = f"[{'PASS' if self.v.ok else 'FAIL'}] {self.n:>2}. {self.title}: {self.v.detail}"
            lines[self.n] = line
            print(line)
            if exc is None:
                assert self.v.ok, line
            return False

    return _Ctx


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    lines = config.stash.get(ACCEPTANCE, {})
    if lines:
        terminalreporter.section("acceptance criteria")
        for n in sorted(lines):
            terminalreporter.write_line(lines[n])
