"""
Shared helpers: logging setup, audit lines, digests and provenance headers
"""
import hashlib
import json
import logging
import os

from .config import Config

LOGGER_NAME = 'llm_perf_tuner'
_configured = False


def setup_logging(level=None):
    """
    Configure the package logger once

    Args:
        level: Optional level name overriding Config.LOG_LEVEL

    Returns:
        The package logger
    """
    global _configured
    logger = logging.getLogger(LOGGER_NAME)
    logger.setLevel(getattr(logging, (level or Config.LOG_LEVEL).upper(), logging.INFO))
    if _configured:
        return logger

    formatter = logging.Formatter('[%(asctime)s] %(levelname)s %(name)s: %(message)s')
    stream = logging.StreamHandler()
    stream.setFormatter(formatter)
    logger.addHandler(stream)

    if Config.LOG_TO_FILE:
        os.makedirs(Config.LOGS_DIR, exist_ok=True)
        file_handler = logging.FileHandler(os.path.join(Config.LOGS_DIR, 'tuner.log'))
        file_handler.setFormatter(formatter)
        logger.addHandler(file_handler)

    logger.propagate = False
    _configured = True
    return logger


def get_logger(name):
    """Child logger under the package logger"""
    return logging.getLogger(f"{LOGGER_NAME}.{name}")


def log_action(action, details):
    """Write an 'action: details' audit line"""
    logging.getLogger(f"{LOGGER_NAME}.audit").info("%s: %s", action, details)


def get_string_hash(data):
    """Generate SHA-256 hash for a string."""
    return hashlib.sha256(data.encode()).hexdigest()


def canonical_json(obj):
    """Key-sorted compact JSON, the form every digest is taken over"""
    return json.dumps(obj, sort_keys=True, separators=(',', ':'), default=str)


def input_digest(obj):
    """SHA-256 of the canonical JSON of normalized inputs"""
    return get_string_hash(canonical_json(obj))


def provenance(digest):
    """Provenance fields attached to every output document"""
    return {'tool': Config.TOOL_NAME, 'version': Config.VERSION, 'input_sha256': digest}


def provenance_header(digest, comment='#'):
    """One comment line naming tool version and input digest"""
    return f"{comment} {Config.TOOL_NAME} {Config.VERSION} input-sha256={digest}\n"


def write_text(path, text):
    """Write a text artifact, creating the parent directory"""
    directory = os.path.dirname(path)
    if directory:
        os.makedirs(directory, exist_ok=True)
    with open(path, 'w', newline='') as f:
        f.write(text)
    log_action('write', path)
    return path
