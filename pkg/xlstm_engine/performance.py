"""
Performance Monitoring Module
Timing, throughput and memory tracking shared by the benchmarks, the trainer
and the service.
"""
import asyncio
import functools
import logging
import statistics
import time
from collections import defaultdict, deque
from contextlib import contextmanager
from datetime import datetime
from typing import Dict, Optional

import psutil

from xlstm_engine.config import config

logger = logging.getLogger(__name__)


def rss_bytes() -> int:
    """Resident set size of this process."""
    return psutil.Process().memory_info().rss


class Stopwatch:
    """Monotonic wall-clock timer: `with Stopwatch() as sw: ...; sw.seconds`"""

    def __init__(self):
        self.start = None
        self.seconds = 0.0

    def __enter__(self):
        self.start = time.perf_counter()
        return self

    def __exit__(self, exc_type, exc_val, exc_tb):
        self.seconds = time.perf_counter() - self.start

    @property
    def ms(self) -> float:
        return self.seconds * 1000


class PerformanceMonitor:
    """Track and analyze performance metrics"""

    def __init__(self, max_history: int = None):
        self.max_history = max_history or config.PERFORMANCE_METRICS_MAX_HISTORY
        self.metrics = defaultdict(lambda: deque(maxlen=self.max_history))
        self.active_requests = 0
        self.total_requests = 0
        self.start_time = time.time()
        self.enabled = config.ENABLE_PERFORMANCE_MONITORING

    def record_metric(self, metric_name: str, value: float, metadata: Optional[dict] = None):
        """Record a performance metric"""
        if not self.enabled:
            return

        self.metrics[metric_name].append({
            "value": value,
            "timestamp": datetime.now().isoformat(),
            "metadata": metadata or {}
        })

        if (
            config.PERFORMANCE_LOG_SLOW_OPERATIONS
            and metric_name.endswith("_ms")
            and value > config.SLOW_OPERATION_THRESHOLD_MS
        ):
            logger.warning(f"⚠️ Slow operation detected: {metric_name} took {value:.2f}ms {metadata or ''}")

    def get_stats(self, metric_name: str) -> Dict:
        """Get statistics for a specific metric"""
        values = [m["value"] for m in self.metrics.get(metric_name, ())]

        if not values:
            return {
                "count": 0,
                "mean": 0,
                "min": 0,
                "max": 0,
                "median": 0,
                "std_dev": 0,
                "percentile_95": 0,
                "percentile_99": 0
            }

        sorted_values = sorted(values)
        count = len(values)

        return {
            "count": count,
            "mean": statistics.mean(values),
            "min": min(values),
            "max": max(values),
            "median": statistics.median(values),
            "std_dev": statistics.stdev(values) if count > 1 else 0,
            "percentile_95": sorted_values[int((count - 1) * 0.95)],
            "percentile_99": sorted_values[int((count - 1) * 0.99)],
            "recent_values": values[-10:]
        }

    def get_system_metrics(self) -> Dict:
        """Get current system metrics"""
        memory = psutil.virtual_memory()
        cpu_percent = psutil.cpu_percent(interval=0.1)
        process_mb = rss_bytes() / (1024 * 1024)

        warnings = []
        if cpu_percent > config.MAX_CPU_PERCENT:
            warnings.append(f"High CPU usage: {cpu_percent:.1f}%")
        if process_mb > config.MAX_MEMORY_MB:
            warnings.append(f"High process memory: {process_mb:.0f}MB")

        return {
            "cpu_percent": cpu_percent,
            "memory_percent": memory.percent,
            "memory_available_mb": memory.available / (1024 * 1024),
            "process_rss_mb": process_mb,
            "active_requests": self.active_requests,
            "total_requests": self.total_requests,
            "uptime_seconds": time.time() - self.start_time,
            "warnings": warnings
        }

    def get_all_metrics(self) -> Dict:
        """Get all performance metrics"""
        metrics = {name: self.get_stats(name) for name in list(self.metrics)}
        metrics["system"] = self.get_system_metrics()
        return metrics

    def reset(self):
        self.metrics.clear()
        self.active_requests = 0
        self.total_requests = 0

    @contextmanager
    def track_request(self):
        """Context manager to track request metrics"""
        if not self.enabled:
            yield
            return

        self.active_requests += 1
        self.total_requests += 1
        start_time = time.perf_counter()

        try:
            yield
        finally:
            self.active_requests -= 1
            self.record_metric("request_duration_ms", (time.perf_counter() - start_time) * 1000)


performance_monitor = PerformanceMonitor()


def _timed(metric_name: str, func_name: str, start_time: float, success: bool, error_type: Optional[str]):
    performance_monitor.record_metric(
        metric_name,
        (time.perf_counter() - start_time) * 1000,
        {"success": success, "error_type": error_type, "function": func_name},
    )


def track_performance(metric_name: str):
    """Decorator to track function duration in ms"""
    def decorator(func):
        @functools.wraps(func)
        async def async_wrapper(*args, **kwargs):
            if not performance_monitor.enabled:
                return await func(*args, **kwargs)
            start_time = time.perf_counter()
            try:
                result = await func(*args, **kwargs)
            except Exception as e:
                _timed(metric_name, func.__name__, start_time, False, type(e).__name__)
                raise
            _timed(metric_name, func.__name__, start_time, True, None)
            return result

        @functools.wraps(func)
        def sync_wrapper(*args, **kwargs):
            if not performance_monitor.enabled:
                return func(*args, **kwargs)
            start_time = time.perf_counter()
            try:
                result = func(*args, **kwargs)
            except Exception as e:
                _timed(metric_name, func.__name__, start_time, False, type(e).__name__)
                raise
            _timed(metric_name, func.__name__, start_time, True, None)
            return result

        return async_wrapper if asyncio.iscoroutinefunction(func) else sync_wrapper

    return decorator


class ThroughputTracker:
    """Track items (tokens) processed per second inside a block"""

    def __init__(self, operation_name: str):
        self.operation_name = operation_name
        self.start_time = None
        self.items_processed = 0
        self.seconds = 0.0

    def __enter__(self):
        self.start_time = time.perf_counter()
        return self

    def __exit__(self, exc_type, exc_val, exc_tb):
        self.seconds = time.perf_counter() - self.start_time
        performance_monitor.record_metric(
            f"{self.operation_name}_duration_ms",
            self.seconds * 1000,
            {
                "items_processed": self.items_processed,
                "items_per_second": self.items_per_second,
                "success": exc_type is None,
            },
        )

    def increment(self, count: int = 1):
        """Increment the processed items counter"""
        self.items_processed += count

    @property
    def items_per_second(self) -> float:
        return self.items_processed / self.seconds if self.seconds > 0 else 0.0
