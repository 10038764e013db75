#!/usr/bin/env python3
"""
Splunk sink for report summaries

`simulate` and `stress` hand their report rows and run manifest to
forward_reports(), which keeps one sink open for the whole run. Rows are held
in a pending list and submitted in one request when the list fills or on
close(). Forwarding is best effort: every failure is logged and counted.
"""

import json
from dataclasses import dataclass, asdict
from datetime import datetime, timezone
from typing import Dict, List, Optional, Sequence
import logging

try:
    import splunklib.client as client
    from splunklib import binding
    SPLUNK_AVAILABLE = True
except ImportError:
    SPLUNK_AVAILABLE = False
    client = None
    binding = None

from splunk_config import SplunkConfig

logger = logging.getLogger(__name__)


def report_event(kind: str, summary: Dict, manifest: Dict, source: str, sourcetype: str) -> Dict:
    """One report summary with its run manifest, shaped as a Splunk event"""
    return {
        'event': {
            'timestamp': datetime.now(timezone.utc).isoformat(),
            'event_type': f'bnstress_{kind}',
            'summary': summary,
            'manifest': manifest,
        },
        'source': source,
        'sourcetype': f"{sourcetype}:{kind}",
    }


@dataclass
class SinkStats:
    sent: int = 0
    failed: int = 0
    requests: int = 0
    last_error: Optional[str] = None


class SplunkReportSink:
    def __init__(self, config: SplunkConfig):
        self.config = config
        self.index = None
        self.stats = SinkStats()
        self._pending: List[Dict] = []

    @property
    def connected(self) -> bool:
        return self.index is not None

    def connect(self) -> bool:
        if not SPLUNK_AVAILABLE:
            self._fail(0, "splunk-sdk is not installed (pip install splunk-sdk)")
            return False
        ok, error = self.config.validate()
        if not ok:
            self._fail(0, f"invalid Splunk configuration: {error}")
            return False
        try:
            handler = binding.handler(timeout=self.config.timeout, verify=self.config.verify_ssl)
            service = client.connect(handler=handler, **self.config.get_connection_params())
            if self.config.index not in service.indexes:
                logger.warning(f"Index '{self.config.index}' not found, creating it")
                service.indexes.create(self.config.index)
            self.index = service.indexes[self.config.index]
        except Exception as e:
            self._fail(0, f"cannot reach Splunk at {self.config.host}:{self.config.port}: {e}")
            return False
        logger.info(f"Forwarding report summaries to {self.config.host}:{self.config.port}/{self.config.index}")
        return True

    def submit(self, kind: str, summary: Dict, manifest: Dict) -> bool:
        """Hold one summary for the next request; False when not connected"""
        if not self.connected:
            logger.warning(f"Splunk sink not connected, {kind} summary dropped")
            return False
        self._pending.append(report_event(kind, summary, manifest, self.config.source, self.config.sourcetype))
        if len(self._pending) >= self.config.max_pending:
            self.flush()
        return True

    def flush(self):
        events, self._pending = self._pending, []
        if not events:
            return
        if not self.connected:
            self._fail(len(events), "sink closed before submit")
            return
        try:
            self.index.submit('\n'.join(json.dumps(e, default=str) for e in events),
                              sourcetype=events[0]['sourcetype'], source=self.config.source)
        except Exception as e:
            self._fail(len(events), f"submit failed: {e}")
            return
        self.stats.sent += len(events)
        self.stats.requests += 1
        logger.debug(f"Submitted {len(events)} report event(s)")

    def close(self):
        self.flush()
        self.index = None

    def _fail(self, n_events: int, message: str):
        logger.error(message)
        self.stats.failed += n_events
        self.stats.last_error = message

    def get_stats(self) -> Dict:
        return asdict(self.stats)


def open_sink(config: Optional[SplunkConfig] = None) -> Optional[SplunkReportSink]:
    sink = SplunkReportSink(config or SplunkConfig())
    return sink if sink.connect() else None


def forward_reports(kind: str, summaries: Sequence[Dict], manifest: Dict,
                    config: Optional[SplunkConfig] = None) -> int:
    """Send every summary of one run through a single sink; returns how many Splunk accepted"""
    sink = open_sink(config)
    if sink is None:
        return 0
    try:
        for summary in summaries:
            sink.submit(kind, summary, manifest)
    finally:
        sink.close()
    return sink.stats.sent
