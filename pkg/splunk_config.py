#!/usr/bin/env python3
"""
Splunk settings for forwarding report summaries

Read from SPLUNK_* environment variables when `simulate` or `stress` run with
--splunk. Nothing here is needed for local runs.
"""

import os
from typing import Callable, Dict, List, Optional, Tuple


def _flag(value: str) -> bool:
    return value.strip().lower() in ('true', '1', 'yes', 'on')


# attribute, variable, default, parser, help
SETTINGS: List[Tuple[str, str, str, Callable, str]] = [
    ('host', 'SPLUNK_HOST', 'localhost', str, 'Splunk server hostname/IP'),
    ('port', 'SPLUNK_PORT', '8089', int, 'Management port'),
    ('username', 'SPLUNK_USERNAME', 'admin', str, 'Account used to submit events'),
    ('password', 'SPLUNK_PASSWORD', 'changeme', str, 'Password for that account'),
    ('scheme', 'SPLUNK_SCHEME', 'https', str, 'http or https'),
    ('index', 'SPLUNK_INDEX', 'bn_stress', str, 'Index receiving report summaries'),
    ('source', 'SPLUNK_SOURCE', 'stress_cli', str, 'Source field of each event'),
    ('sourcetype', 'SPLUNK_SOURCETYPE', 'bnstress:json', str, 'Sourcetype prefix; the report kind is appended'),
    ('verify_ssl', 'SPLUNK_VERIFY_SSL', 'false', _flag, 'Verify the server certificate'),
    ('timeout', 'SPLUNK_TIMEOUT', '30', int, 'Connection timeout in seconds'),
    ('max_pending', 'SPLUNK_MAX_PENDING', '16', int, 'Report rows held before a submit; the rest go on close'),
]


class SplunkConfig:
    """Connection and indexing parameters for the report sink"""

    def __init__(self):
        for attr, variable, default, parse, _ in SETTINGS:
            setattr(self, attr, parse(os.getenv(variable, default)))

    def to_dict(self) -> Dict:
        values = {attr: getattr(self, attr) for attr, *_ in SETTINGS}
        values['password'] = '***'
        return values

    def get_connection_params(self) -> Dict:
        """Keyword arguments for splunklib.client.connect"""
        return {
            'host': self.host,
            'port': self.port,
            'username': self.username,
            'password': self.password,
            'scheme': self.scheme,
        }

    def validate(self) -> Tuple[bool, Optional[str]]:
        problems = []
        if not self.host:
            problems.append("host is required")
        if not self.username or not self.password:
            problems.append("username and password are required")
        if not 1 <= self.port <= 65535:
            problems.append(f"invalid port {self.port}")
        if self.scheme not in ('http', 'https'):
            problems.append(f"invalid scheme '{self.scheme}' (http or https)")
        if not self.index:
            problems.append("index is required")
        if self.max_pending < 1:
            problems.append("max_pending must be >= 1")
        if problems:
            return False, "; ".join(problems)
        return True, None


def print_config_help():
    print("Splunk forwarding (stress_cli.py simulate/stress --splunk)")
    print("=" * 50)
    for _, variable, default, _, text in SETTINGS:
        print(f"  {variable:<22} {text} (default: {default})")
    print()
    print("Example:")
    print("  export SPLUNK_HOST=splunk.example.com SPLUNK_INDEX=model_risk")
    print("  python3 stress_cli.py stress --bundle out/toy --scenario shift_x3.json --seed 7 --out r.json --splunk")


if __name__ == "__main__":
    config = SplunkConfig()
    for key, value in config.to_dict().items():
        print(f"  {key}: {value}")
    ok, error = config.validate()
    print("Configuration is valid" if ok else f"Configuration error: {error}")
    print()
    print_config_help()
