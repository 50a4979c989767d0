import os


INITIAL_LOG_CONFIG = {
    "format": "%(asctime)s %(levelname)-5.5s [%(name)s] %(message)s",
    "filename": "eigvcc.log",
}


_default = dict(
    EIGVCC_SEED="",
    EIGVCC_ZETA=1e-3,
    EIGVCC_TAIL_MASS=1e-14,
    EIGVCC_BOOTSTRAP_N=1000,
    EIGVCC_BOOTSTRAP_N0=5000,
    EIGVCC_K_COUNT=5,
    EIGVCC_MAX_RESTARTS=5,
    EIGVCC_POLY_RETRIES=10,
    EIGVCC_MC_SAMPLES=10_000_000,
    EIGVCC_MC_CHUNK=1_000_000,
    EIGVCC_SD_FLOOR=1e-12,
    EIGVCC_JOBS=1,
)


def get(var_name: str):
    return os.environ.get(var_name, _default.get(var_name, ""))


def get_int(var_name: str) -> int:
    return int(get(var_name))


def get_float(var_name: str) -> float:
    return float(get(var_name))
