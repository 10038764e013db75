#!/usr/bin/env python3
"""
Configuration for the stress-testing toolkit
Defaults come from BNSTRESS_* environment variables and can be overlaid by a JSON file.
"""

import os
import json
import logging
from typing import Dict, Any, Optional, Tuple

ENV_PREFIX = 'BNSTRESS_'


class StressConfig:
    """Run configuration shared by the library entry points and the CLI"""

    def __init__(self):
        """Initialize configuration from environment variables"""
        self.logger = logging.getLogger(__name__)

        self.log_level = os.getenv('BNSTRESS_LOG_LEVEL', 'INFO').upper()
        self.workers = int(os.getenv('BNSTRESS_WORKERS', '1'))

        # Simulation
        self.default_bins = int(os.getenv('BNSTRESS_DEFAULT_BINS', '20'))
        self.default_reps = int(os.getenv('BNSTRESS_DEFAULT_REPS', '100'))
        self.default_samples = int(os.getenv('BNSTRESS_DEFAULT_SAMPLES', '5000'))
        self.enum_cap = int(float(os.getenv('BNSTRESS_ENUM_CAP', '1e7')))
        self.kl_smoothing = float(os.getenv('BNSTRESS_KL_SMOOTHING', '0'))

        # Training
        self.epochs = int(os.getenv('BNSTRESS_EPOCHS', '200'))
        self.lr_linear = float(os.getenv('BNSTRESS_LR_LINEAR', '0.1'))
        self.lr_mlp = float(os.getenv('BNSTRESS_LR_MLP', '0.01'))
        self.full_batch_rows = int(os.getenv('BNSTRESS_FULL_BATCH_ROWS', '10000'))
        self.gold_labels = self._get_bool_env('BNSTRESS_GOLD_LABELS', False)
        self.model_prior_lambda = float(os.getenv('BNSTRESS_MODEL_PRIOR_LAMBDA', '0.0'))

        # BankSim labeling thresholds on x9
        self.rare_threshold = float(os.getenv('BNSTRESS_RARE_THRESHOLD', '0.05'))
        self.infrequent_threshold = float(os.getenv('BNSTRESS_INFREQUENT_THRESHOLD', '0.25'))

        self._validate_config()

    def _get_bool_env(self, key: str, default: bool = False) -> bool:
        """Get boolean value from environment variable"""
        value = os.getenv(key, str(default)).lower()
        return value in ('true', '1', 'yes', 'on', 'enabled')

    def _errors(self) -> list:
        errors = []
        if self.log_level not in ('DEBUG', 'INFO', 'WARNING', 'ERROR', 'CRITICAL'):
            errors.append(f"Invalid log level: {self.log_level}")
        if self.workers < 1:
            errors.append(f"Invalid workers: {self.workers}. Must be >= 1")
        for name in ('default_bins', 'default_reps', 'epochs', 'full_batch_rows', 'enum_cap'):
            if getattr(self, name) < 1:
                errors.append(f"Invalid {name}: {getattr(self, name)}. Must be >= 1")
        if self.default_samples < 0:
            errors.append(f"Invalid default_samples: {self.default_samples}. Must be >= 0")
        if self.lr_linear <= 0 or self.lr_mlp <= 0:
            errors.append("Learning rates must be > 0")
        if self.kl_smoothing < 0:
            errors.append(f"Invalid kl_smoothing: {self.kl_smoothing}. Must be >= 0")
        if not 0.0 <= self.model_prior_lambda <= 1.0:
            errors.append(f"Invalid model_prior_lambda: {self.model_prior_lambda}. Must be in [0, 1]")
        if not 0.0 <= self.rare_threshold <= self.infrequent_threshold <= 1.0:
            errors.append("Thresholds must satisfy 0 <= rare <= infrequent <= 1")
        return errors

    def _validate_config(self):
        """Validate configuration values"""
        errors = self._errors()
        if errors:
            error_msg = "Configuration validation errors:\n" + "\n".join(f"  - {error}" for error in errors)
            raise ValueError(error_msg)

    def validate(self) -> Tuple[bool, Optional[str]]:
        errors = self._errors()
        if errors:
            return False, "; ".join(errors)
        return True, None

    @property
    def thresholds(self) -> Tuple[float, float]:
        return self.rare_threshold, self.infrequent_threshold

    def learning_rate(self, architecture: str) -> Optional[float]:
        return {'linear': self.lr_linear, 'mlp': self.lr_mlp}.get(architecture)

    def to_dict(self) -> Dict[str, Any]:
        return {
            'log_level': self.log_level,
            'workers': self.workers,
            'default_bins': self.default_bins,
            'default_reps': self.default_reps,
            'default_samples': self.default_samples,
            'enum_cap': self.enum_cap,
            'kl_smoothing': self.kl_smoothing,
            'epochs': self.epochs,
            'lr_linear': self.lr_linear,
            'lr_mlp': self.lr_mlp,
            'full_batch_rows': self.full_batch_rows,
            'gold_labels': self.gold_labels,
            'model_prior_lambda': self.model_prior_lambda,
            'rare_threshold': self.rare_threshold,
            'infrequent_threshold': self.infrequent_threshold,
        }

    def get_summary(self) -> Dict[str, Any]:
        """Get configuration summary for logging"""
        return {
            'workers': self.workers,
            'bins': self.default_bins,
            'reps': self.default_reps,
            'samples': self.default_samples,
            'epochs': self.epochs,
            'gold_labels': self.gold_labels,
            'kl_smoothing': self.kl_smoothing or None,
        }

    def update(self, values: Dict[str, Any]) -> 'StressConfig':
        """Overlay known keys; unknown keys are rejected"""
        known = self.to_dict()
        for key, value in values.items():
            if key not in known:
                raise ValueError(f"Unknown configuration key: {key}")
            current = known[key]
            if isinstance(current, bool):
                value = value if isinstance(value, bool) else str(value).lower() in ('true', '1', 'yes', 'on')
            elif isinstance(current, int):
                value = int(value)
            elif isinstance(current, float):
                value = float(value)
            setattr(self, key, value)
        self._validate_config()
        return self

    @classmethod
    def from_file(cls, config_file: str) -> 'StressConfig':
        """Environment defaults overlaid by a JSON object of the same keys"""
        config = cls()
        with open(config_file) as f:
            values = json.load(f)
        if not isinstance(values, dict):
            raise ValueError(f"{config_file}: configuration must be a JSON object")
        config.logger.info(f"Loaded configuration overrides from {config_file}")
        return config.update(values)


def main():
    """Show the effective configuration"""
    try:
        config = StressConfig()
        print("Configuration loaded successfully:")
        print(json.dumps(config.to_dict(), indent=2))
    except ValueError as e:
        print(f"Configuration error: {e}")


if __name__ == "__main__":
    main()
