import logging
from pathlib import Path
from .config import load_config

def setup_logger(name: str, level=None) -> logging.Logger:
    """
    A simple logger that writes to both:
     • stdout (console)
     • <GMC_LOG_DIR>/pipeline.log (persistent file)
    """
    cfg = load_config()
    if level is None:
        level = getattr(logging, cfg["log_level"], logging.INFO)

    log_dir = Path(cfg["paths"]["logs"])
    log_dir.mkdir(parents=True, exist_ok=True)

    logger = logging.getLogger(name)
    logger.setLevel(level)

    if not logger.handlers:
        ch = logging.StreamHandler()
        ch.setLevel(level)
        ch.setFormatter(logging.Formatter("[%(levelname)s] %(message)s"))
        logger.addHandler(ch)

        fh = logging.FileHandler(log_dir / "pipeline.log")
        fh.setLevel(level)
        fh.setFormatter(logging.Formatter("%(asctime)s [%(levelname)s] %(name)s: %(message)s"))
        logger.addHandler(fh)

    return logger
