from pathlib import Path
from dotenv import load_dotenv
import os

env_path = Path(__file__).parent.parent.parent / "config" / ".env"
load_dotenv(dotenv_path=env_path)


def load_config():
    """Reads environment variables from the loaded .env file
    and returns a Python dictionary of process-level settings"""
    return {
        "workers": max(1, int(os.getenv("GMC_WORKERS", 1))),
        "paths": {
            "logs":   os.getenv("GMC_LOG_DIR", str(Path(__file__).parent.parent / "logs")),
            "output": os.getenv("GMC_OUTPUT_DIR", "./runs"),
        },
        "log_level": os.getenv("GMC_LOG_LEVEL", "INFO").upper(),
        "run_slow_tests": os.getenv("GMC_RUN_SLOW", "0") == "1",
    }
