"""
Configuration management for the LLM training performance tuner
Defaults come from config.yaml, environment variables (TUNER_*) override them
"""
import os
import yaml
from dotenv import load_dotenv

# Load environment variables
load_dotenv()

BASE_DIR = os.path.dirname(os.path.dirname(os.path.abspath(__file__)))
CONFIG_YAML = os.path.join(BASE_DIR, 'config.yaml')


def _load_yaml_defaults(path):
    """Read the tool settings file, empty dict when absent"""
    if not os.path.exists(path):
        return {}
    with open(path, 'r') as f:
        return yaml.safe_load(f) or {}


_defaults = _load_yaml_defaults(CONFIG_YAML)


def _setting(section, key, env_name, default, cast=str):
    """
    Resolve one setting

    Args:
        section: Section of config.yaml
        key: Key inside the section
        env_name: Environment variable that overrides the yaml value
        default: Value used when neither source defines it
        cast: Conversion applied to the resolved value

    Returns:
        The typed setting value
    """
    value = _defaults.get(section, {}).get(key, default)
    env_value = os.getenv(env_name)
    if env_value is not None:
        value = env_value
    if cast is bool and isinstance(value, str):
        return value.lower() in ('1', 'true', 'yes', 'on')
    return cast(value)


class Config:
    """Tool configuration"""

    VERSION = str(_defaults.get('system', {}).get('version', '1.0.0'))
    TOOL_NAME = 'llm_perf_tuner'

    # Memory model
    BYTES_PER_PARAM = _setting('memory', 'bytes_per_param', 'TUNER_BYTES_PER_PARAM', 16, float)
    ACT_LINEAR_COEF = _setting('memory', 'act_linear_coef', 'TUNER_ACT_LINEAR_COEF', 34, float)
    ACT_ATTN_COEF = _setting('memory', 'act_attn_coef', 'TUNER_ACT_ATTN_COEF', 5, float)

    # Cost model
    RECOMPUTE = _setting('cost_model', 'recompute', 'TUNER_RECOMPUTE', True, bool)
    DP_OVERLAP = _setting('cost_model', 'dp_overlap', 'TUNER_DP_OVERLAP', 0.0, float)
    DP_BUCKETS = _setting('cost_model', 'dp_buckets', 'TUNER_DP_BUCKETS', 1, int)
    K_ACTIVE = _setting('cost_model', 'k_active', 'TUNER_K_ACTIVE', 2, int)
    ASSEMBLY_RTOL = _setting('cost_model', 'assembly_rtol', 'TUNER_ASSEMBLY_RTOL', 1e-9, float)

    # Traffic matrix
    STRICT_MAPPING = _setting('traffic', 'strict_mapping', 'TUNER_STRICT_MAPPING', False, bool)
    PP_SCATTER_GATHER = _setting('traffic', 'pp_scatter_gather', 'TUNER_PP_SCATTER_GATHER', False, bool)
    ATA_GATE_SKEW = _setting('traffic', 'ata_gate_skew', 'TUNER_ATA_GATE_SKEW', 0.5, float)
    ATA_TREND_STEPS = _setting('traffic', 'ata_trend_steps', 'TUNER_ATA_TREND_STEPS', 8, int)

    # Simulator
    BWD_FWD_RATIO = _setting('simulator', 'bwd_fwd_ratio', 'TUNER_BWD_FWD_RATIO', 3.0, float)

    # Tuner
    PARALLEL_WORKERS = _setting('tuner', 'parallel_workers', 'TUNER_WORKERS', 4, int)
    TIE_DIGITS = _setting('tuner', 'tie_digits', 'TUNER_TIE_DIGITS', 12, int)
    EVAL_CACHE_SIZE = _setting('tuner', 'eval_cache_size', 'TUNER_EVAL_CACHE_SIZE', 4096, int)
    RENT_RATE = _setting('tuner', 'rent_rate', 'TUNER_RENT_RATE', 3.0, float)
    GPU_PRICE = _setting('tuner', 'gpu_price', 'TUNER_GPU_PRICE', 20000.0, float)

    # Output and logging
    OUTPUT_DIR = os.path.join(BASE_DIR, _setting('output', 'output_dir', 'TUNER_OUTPUT_DIR', 'out'))
    LOGS_DIR = os.path.join(BASE_DIR, _setting('output', 'logs_dir', 'TUNER_LOGS_DIR', 'logs'))
    LOG_LEVEL = _setting('output', 'log_level', 'TUNER_LOG_LEVEL', 'INFO').upper()
    LOG_TO_FILE = _setting('output', 'log_to_file', 'TUNER_LOG_TO_FILE', False, bool)

    # Bundled data
    CONFIGS_DIR = os.path.join(BASE_DIR, 'configs')
    FIXTURES_DIR = os.path.join(CONFIGS_DIR, 'fixtures')

    @staticmethod
    def init_app(output_dir=None):
        """Create output and log directories"""
        directories = [output_dir or Config.OUTPUT_DIR]
        if Config.LOG_TO_FILE:
            directories.append(Config.LOGS_DIR)

        for directory in directories:
            os.makedirs(directory, exist_ok=True)
