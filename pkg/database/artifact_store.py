"""
File storage for run artifacts: ensembles, quantile paths, density grids,
flow trajectories, per-point margins and key-value reports.

Every CSV starts with one provenance comment line
    # config_sha256=<hex> seed=<u64>
followed by a pandas-written table with a fixed float format.
"""
import os
import struct
from typing import Dict, List, Optional

import numpy as np
import pandas as pd

from calculations.density import DensityEstimate
from core.errors import ConfigurationError
from models.paths import ParticleEnsemble, QuantilePath
from models.results import FlowResult
from utils.formatters import format_report
from utils.logger import get_logger

logger = get_logger(__name__)

# magic, N, n, reserved
ENSEMBLE_HEADER = struct.Struct("<4sIII")
ENSEMBLE_MAGIC = b"QMKV"
FLOAT_FORMAT = "%.17g"


def provenance_line(config_hash: str, seed: Optional[int]) -> str:
    return f"# config_sha256={config_hash} seed={'' if seed is None else int(seed)}\n"


def read_provenance(path: str) -> Dict[str, str]:
    """Key-value pairs of the leading comment line (empty if there is none)"""
    with open(path, "r") as f:
        first = f.readline()
    if not first.startswith("#"):
        return {}
    return dict(item.split("=", 1) for item in first[1:].split() if "=" in item)


class ArtifactStore:
    """Writes and reads the files of one output directory"""

    def __init__(self, out_dir: str = "./output", config_hash: str = "", seed: Optional[int] = None):
        self.out_dir = out_dir
        self.config_hash = config_hash
        self.seed = seed

        # Create output directory if it doesn't exist
        os.makedirs(out_dir, exist_ok=True)

    def path(self, name: str) -> str:
        return os.path.join(self.out_dir, name)

    # ---- generic ------------------------------------------------------------

    def write_csv(self, name: str, frame: pd.DataFrame) -> str:
        target = self.path(name)
        with open(target, "w", newline="") as f:
            f.write(provenance_line(self.config_hash, self.seed))
            frame.to_csv(f, index=False, float_format=FLOAT_FORMAT, lineterminator="\n")
        logger.debug(f"Wrote {len(frame)} rows to {target}")
        return target

    @staticmethod
    def read_csv(path: str) -> pd.DataFrame:
        if not os.path.exists(path):
            raise ConfigurationError(f"file not found: {path}", field="path")
        return pd.read_csv(path, comment="#")

    def write_report(self, name: str, record: Dict, header: str = "") -> str:
        target = self.path(name)
        provenance = f"config_sha256={self.config_hash} seed={'' if self.seed is None else self.seed}"
        with open(target, "w", newline="") as f:
            f.write(format_report(record, f"{header} {provenance}".strip()))
        return target

    def write_rows(self, name: str, rows: List[Dict]) -> str:
        """Per-point margin tables; nested values are flattened to text columns"""
        frame = pd.DataFrame([{k: (",".join(map(str, v)) if isinstance(v, (list, tuple)) else v)
                               for k, v in row.items()} for row in rows])
        return self.write_csv(name, frame)

    # ---- ensembles ----------------------------------------------------------

    def save_ensemble_csv(self, name: str, ensemble: ParticleEnsemble) -> str:
        frame = pd.DataFrame(ensemble.states, columns=[f"x{j + 1}" for j in range(ensemble.n)])
        frame.insert(0, "particle_id", np.arange(ensemble.N))
        return self.write_csv(name, frame)

    @classmethod
    def load_ensemble_csv(cls, path: str, t: float = 0.0) -> ParticleEnsemble:
        frame = cls.read_csv(path)
        coords = [c for c in frame.columns if c.startswith("x")]
        if not coords:
            raise ConfigurationError(f"{path} has no x1..xn columns", field="ensemble")
        frame = frame.sort_values("particle_id") if "particle_id" in frame.columns else frame
        return ParticleEnsemble(states=frame[coords].to_numpy(dtype=np.float64), t=t)

    def save_ensemble_binary(self, name: str, ensemble: ParticleEnsemble) -> str:
        target = self.path(name)
        with open(target, "wb") as f:
            f.write(ENSEMBLE_HEADER.pack(ENSEMBLE_MAGIC, ensemble.N, ensemble.n, 0))
            f.write(np.ascontiguousarray(ensemble.states, dtype="<f8").tobytes())
        return target

    @staticmethod
    def load_ensemble_binary(path: str, t: float = 0.0) -> ParticleEnsemble:
        with open(path, "rb") as f:
            header = f.read(ENSEMBLE_HEADER.size)
            if len(header) != ENSEMBLE_HEADER.size:
                raise ConfigurationError(f"{path}: truncated header", field="ensemble")
            magic, N, n, _ = ENSEMBLE_HEADER.unpack(header)
            if magic != ENSEMBLE_MAGIC:
                raise ConfigurationError(f"{path}: not an ensemble dump", field="ensemble")
            data = np.frombuffer(f.read(), dtype="<f8")
        if data.size != N * n:
            raise ConfigurationError(f"{path}: expected {N * n} values, found {data.size}", field="ensemble")
        return ParticleEnsemble(states=data.reshape(N, n).astype(np.float64), t=t)

    # ---- quantile paths -----------------------------------------------------

    def save_quantile_path(self, name: str, path: QuantilePath) -> str:
        frame = pd.DataFrame(path.values, columns=[f"q{j + 1}" for j in range(path.n)])
        frame.insert(0, "t", path.times)
        return self.write_csv(name, frame)

    @classmethod
    def load_quantile_path(cls, path: str) -> QuantilePath:
        frame = cls.read_csv(path)
        coords = [c for c in frame.columns if c.startswith("q")]
        return QuantilePath(times=frame["t"].to_numpy(dtype=np.float64),
                            values=frame[coords].to_numpy(dtype=np.float64))

    # ---- densities and flows ------------------------------------------------

    def save_density_grid(self, name: str, density: DensityEstimate) -> str:
        return self.write_csv(name, density.to_frame())

    @classmethod
    def load_density_grid(cls, path: str) -> DensityEstimate:
        return DensityEstimate.from_frame(cls.read_csv(path), label=os.path.basename(path))

    def save_flow(self, name: str, flow: FlowResult) -> str:
        if flow.path is None:
            raise ConfigurationError("flow result has no recorded path", field="record_path")
        frame = pd.DataFrame(flow.path, columns=[f"theta{j + 1}" for j in range(flow.path.shape[1])])
        frame.insert(0, "t", flow.path_times)
        frame["log_jac_det"] = flow.path_log_det
        return self.write_csv(name, frame)

    def save_series(self, name: str, columns: Dict[str, List]) -> str:
        return self.write_csv(name, pd.DataFrame(columns))
