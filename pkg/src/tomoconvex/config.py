"""Run configuration: a flat INI file with one section per pipeline block.

All numeric defaults mirror the module defaults; every random choice flows
from the explicit seeds recorded here, so identical configs reproduce
identical artifacts bit for bit.
"""

from __future__ import annotations

import configparser
import hashlib
import io
from dataclasses import asdict, dataclass, field

from .core import Grid
from .optimizer import SolverConfig
from .presets import PRESET_NAMES

DEFAULT_CONFIG = """\
[grid]
B = 8
Mz = 33
A = 1.0
sigma = 0.5
h0 = 0.02

[basis]
N = 3
a = 1.0
Q = 64

[forward]
refine = 4
z_refine = 1
sweep_tol = 1e-9
sources = 15

[data]
noise = 0.0
seed = 1234

[solver]
lambda = 1.0
gamma = 1e-2
rho = 3e-3
R = 0.5
max_iter = 600
stop_tol = 1e-7
start = zero
set_mode = floor

[medium]
preset = bump
"""


@dataclass
class RunConfig:
    grid: Grid
    N: int
    a: float
    Q: int
    refine: int
    z_refine: int
    sweep_tol: float
    sources: int
    noise: float
    seed: int
    solver: SolverConfig
    preset: str | None
    medium_file: str | None = None

    def validate(self):
        if self.N < 1 or self.Q < max(4 * self.N + 8, 5):
            raise ValueError(f"need Q >= max(4N+8, 5); got N={self.N}, Q={self.Q}")
        if self.a <= 0:
            raise ValueError("basis shift a must be positive")
        if self.sources < 2:
            raise ValueError("need at least 2 sources")
        if not (0.0 <= self.noise < 1.0):
            raise ValueError("noise level must lie in [0, 1)")
        if self.refine < 1 or self.z_refine < 1:
            raise ValueError("refinement factors must be >= 1")
        if self.preset is None and self.medium_file is None:
            raise ValueError("either a medium preset or a medium file is required")
        if self.preset is not None and self.preset not in PRESET_NAMES:
            raise ValueError(f"unknown preset '{self.preset}'; choose from {PRESET_NAMES}")

    def canonical_text(self) -> str:
        d = {"grid": self.grid.attrs(),
             "basis": {"N": self.N, "a": self.a, "Q": self.Q},
             "forward": {"refine": self.refine, "z_refine": self.z_refine,
                         "sweep_tol": self.sweep_tol, "sources": self.sources},
             "data": {"noise": self.noise, "seed": self.seed},
             "solver": asdict(self.solver),
             "medium": {"preset": self.preset, "file": self.medium_file}}
        lines = []
        for sec in sorted(d):
            for k in sorted(d[sec]):
                lines.append(f"{sec}.{k}={d[sec][k]!r}")
        return "\n".join(lines)

    def digest(self) -> str:
        return hashlib.sha256(self.canonical_text().encode()).hexdigest()


def parse_config(text: str) -> RunConfig:
    cp = configparser.ConfigParser()
    cp.read_string(text)
    g = cp["grid"]
    grid = Grid(B=g.getint("B"), Mz=g.getint("Mz"), A=g.getfloat("A"),
                sigma=g.getfloat("sigma"), h0=g.getfloat("h0", fallback=0.02))
    b = cp["basis"]
    f = cp["forward"]
    d = cp["data"]
    s = cp["solver"]
    solver = SolverConfig(
        lam=s.getfloat("lambda", fallback=1.0),
        gamma=s.getfloat("gamma", fallback=1e-2),
        rho=s.getfloat("rho", fallback=3e-3),
        R=s.getfloat("R", fallback=0.5),
        max_iter=s.getint("max_iter", fallback=600),
        stop_tol=s.getfloat("stop_tol", fallback=1e-7),
        start=s.get("start", fallback="zero"),
        set_mode=s.get("set_mode", fallback="floor"),
    )
    m = cp["medium"] if cp.has_section("medium") else {}
    cfg = RunConfig(
        grid=grid,
        N=b.getint("N"), a=b.getfloat("a", fallback=1.0),
        Q=b.getint("Q", fallback=max(4 * b.getint("N") + 8, 64)),
        refine=f.getint("refine", fallback=4),
        z_refine=f.getint("z_refine", fallback=1),
        sweep_tol=f.getfloat("sweep_tol", fallback=1e-9),
        sources=f.getint("sources", fallback=15),
        noise=d.getfloat("noise", fallback=0.0),
        seed=d.getint("seed", fallback=1234),
        solver=solver,
        preset=m.get("preset", fallback=None) if hasattr(m, "get") else None,
        medium_file=m.get("file", fallback=None) if hasattr(m, "get") else None,
    )
    cfg.validate()
    return cfg


def load_config(path) -> RunConfig:
    with open(path) as fh:
        return parse_config(fh.read())


def write_default_config(path):
    with open(path, "w") as fh:
        fh.write(DEFAULT_CONFIG)
