"""
Toolkit Configuration Manager
Loads the JSON defaults used by the pipeline, the evaluation suite and the
cross-validation harness, with environment overrides for deployment.
"""

import copy
import json
import logging
import os
from typing import Any, Dict, List, Optional, Tuple

logger = logging.getLogger(__name__)

REQUIRED_SECTIONS = ['pipeline', 'evaluation', 'harness', 'logging', 'web']

DEFAULT_CONFIG: Dict[str, Any] = {
    "toolkit_config": {
        "title": "Mediastinal Lymph-Node Toolkit",
        "description": "Built-in defaults",
        "version": "1.0"
    },
    "pipeline": {
        "target_spacing_mm": 1.0,
        "clip_hu": [-250, 500],
        "slab_size": 32,
        "stride": 8,
        "axial_dims": [256, 192],
        "fullvol_dims": [128, 128, 144],
        "lung_threshold_hu": -320
    },
    "evaluation": {
        "connectivity": 26,
        "min_pair_dice": 0.0,
        "min_fp_voxels": 0,
        "thresholds": [0.1, 0.2, 0.3, 0.4, 0.5, 0.6, 0.7, 0.8, 0.9, 1.0]
    },
    "harness": {
        "folds": 5,
        "seed": 20210601,
        "jobs": 0,
        "timing_repeats": 5
    },
    "logging": {
        "level": "INFO"
    },
    "web": {
        "results_folder": "results"
    }
}

# environment variable -> (section, key, caster)
ENV_OVERRIDES = {
    'LNTK_JOBS': ('harness', 'jobs', int),
    'LNTK_SEED': ('harness', 'seed', int),
    'LNTK_LOG_LEVEL': ('logging', 'level', str),
    'LNTK_RESULTS_FOLDER': ('web', 'results_folder', str),
}


class ConfigManager:
    """Manages toolkit configuration"""

    def __init__(self, config_path: Optional[str] = None):
        if config_path is None:
            config_path = os.environ.get(
                'LNTK_CONFIG', os.path.join(os.path.dirname(__file__), 'toolkit_config.json'))

        self.config_path = config_path
        self.config = self._load_config()
        self._apply_env_overrides()

    def _load_config(self) -> Dict[str, Any]:
        """Load configuration from JSON file"""
        try:
            with open(self.config_path, 'r', encoding='utf-8') as f:
                config = json.load(f)

            self._validate_config(config)
            return config

        except FileNotFoundError:
            logger.warning(f"Configuration file not found: {self.config_path}, using defaults")
            return self._get_default_config()
        except json.JSONDecodeError as e:
            logger.warning(f"Invalid JSON in configuration file: {e}, using defaults")
            return self._get_default_config()
        except ValueError as e:
            logger.warning(f"Invalid configuration: {e}, using defaults")
            return self._get_default_config()

    def _validate_config(self, config: Dict[str, Any]) -> None:
        """Validate configuration structure"""
        for key in REQUIRED_SECTIONS:
            if key not in config:
                raise ValueError(f"Missing required configuration section: {key}")

        pipeline = config['pipeline']
        lo, hi = pipeline.get('clip_hu', DEFAULT_CONFIG['pipeline']['clip_hu'])
        if lo >= hi:
            raise ValueError(f"clip_hu lower bound {lo} must be below upper bound {hi}")
        if pipeline.get('stride', 1) > pipeline.get('slab_size', 1):
            raise ValueError("stride must not exceed slab_size")

        if config['evaluation'].get('connectivity') not in (6, 18, 26):
            raise ValueError("connectivity must be one of 6, 18, 26")

    def _get_default_config(self) -> Dict[str, Any]:
        """Return default configuration if config file is not available"""
        return copy.deepcopy(DEFAULT_CONFIG)

    def _apply_env_overrides(self) -> None:
        for variable, (section, key, caster) in ENV_OVERRIDES.items():
            raw = os.environ.get(variable)
            if raw is None or raw == '':
                continue
            try:
                self.config[section][key] = caster(raw)
            except ValueError:
                logger.warning(f"Ignoring {variable}={raw!r}: not a valid {caster.__name__}")

    def get(self, section: str, key: str, default: Any = None) -> Any:
        """Get a single configuration value, falling back to the built-in default"""
        value = self.config.get(section, {}).get(key)
        if value is None:
            value = DEFAULT_CONFIG.get(section, {}).get(key, default)
        return value

    def get_section(self, section: str) -> Dict[str, Any]:
        merged = copy.deepcopy(DEFAULT_CONFIG.get(section, {}))
        merged.update(self.config.get(section, {}))
        return merged

    def get_clip_window(self) -> Tuple[float, float]:
        lo, hi = self.get('pipeline', 'clip_hu')
        return float(lo), float(hi)

    def get_thresholds(self) -> List[float]:
        return [round(float(t), 1) for t in self.get('evaluation', 'thresholds')]

    def get_jobs(self) -> int:
        """Worker count; 0 means one per available core"""
        jobs = int(self.get('harness', 'jobs', 0))
        return jobs if jobs > 0 else (os.cpu_count() or 1)

    def save_config(self, config: Dict[str, Any]) -> bool:
        """Save configuration to file"""
        try:
            self._validate_config(config)

            with open(self.config_path, 'w', encoding='utf-8') as f:
                json.dump(config, f, indent=2, ensure_ascii=False)
                f.write('\n')

            self.config = config
            return True

        except (OSError, ValueError) as e:
            logger.error(f"Error saving configuration: {e}")
            return False


_config_manager: Optional[ConfigManager] = None


def get_config_manager(reload: bool = False) -> ConfigManager:
    """Get the global configuration manager instance"""
    global _config_manager
    if _config_manager is None or reload:
        _config_manager = ConfigManager()
    return _config_manager
