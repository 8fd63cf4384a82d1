# config.py
import os

API_HOST = os.environ.get("SMPC_API_HOST", "127.0.0.1")
API_PORT = int(os.environ.get("SMPC_API_PORT", "8766"))
LOG_LEVEL = os.environ.get("SMPC_LOG_LEVEL", "INFO").upper()

_base_dir = os.path.dirname(os.path.abspath(__file__))
# Куда пишутся результаты, если в конфиге и в CLI ничего не задано
OUTPUT_DIR = os.environ.get("SMPC_OUTPUT_DIR", os.path.join(_base_dir, "runs"))
CONFIG_DIR = os.path.join(_base_dir, "configs")
DEFAULT_CONFIG = os.path.join(CONFIG_DIR, "dcdc.toml")

DEFAULT_PROFILE = "desk"
# Расписание алгоритма: desk для CI, paper в полном масштабе (долго)
PROFILES: dict[str, dict[str, int]] = {
    "desk": {"t_wait": 200, "t_col": 1000, "t_final": 100, "eval_horizon": 10_000, "refit_every": 10},
    "paper": {"t_wait": 500, "t_col": 5000, "t_final": 150, "eval_horizon": 20_000, "refit_every": 1},
}
PROFILE_ALIASES = {"full": "paper"}

QP_MAX_ITER = 500
SLACK_WEIGHT = 1e8
EVAL_BURN_IN = 500
SCENARIO_SAMPLES = 2000
