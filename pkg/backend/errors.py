"""
Archer error hierarchy
Every failure carries a short category used by the CLI and the report service
"""

from typing import List, Optional, Sequence


class ArcherError(Exception):
    """Base class for every error raised by archersim"""

    category = "archer"

    def __init__(self, message: str = ""):
        super().__init__(message)
        self.message = message

    def __str__(self) -> str:
        return self.message


# Overlay


class OverlayError(ArcherError):
    category = "overlay"


class IsolatedNodeError(OverlayError):
    category = "isolated-node"


class JoinError(OverlayError):
    category = "join"


class NoRouteToHost(OverlayError):
    category = "no-route"


class LinkDown(OverlayError):
    category = "link-down"


# Security


class SecurityError(ArcherError):
    category = "security"


class HandshakeRejected(SecurityError):
    category = "handshake"


class ChannelError(SecurityError):
    category = "channel"


class AuthenticationFailure(ChannelError):
    category = "auth"


class ReplayError(ChannelError):
    category = "replay"


# Matchmaking


class ExpressionError(ArcherError):
    category = "expression"


class ExpressionSyntaxError(ExpressionError):
    category = "syntax"

    def __init__(self, message: str, position: int):
        super().__init__(f"{message} at position {position}")
        self.position = position


class AdError(ArcherError):
    category = "ad"


# Configuration


class InvalidConfigError(ArcherError):
    category = "invalid-config"


class ConfigError(ArcherError):
    """Config file problems; lists every violation found, not just the first"""

    category = "config"

    def __init__(self, message: str, violations: Optional[Sequence[str]] = None, line: Optional[int] = None):
        self.violations: List[str] = list(violations or [])
        self.line = line
        if self.violations:
            message = f"{message}: " + "; ".join(self.violations)
        super().__init__(message)


# Simulation


class SimulationError(ArcherError):
    category = "simulation"


class StuckQueueError(SimulationError):
    category = "stuck-queue"

    def __init__(self, message: str, stuck_jobs: Sequence[str]):
        self.stuck_jobs = sorted(stuck_jobs)
        shown = ", ".join(self.stuck_jobs[:10])
        if len(self.stuck_jobs) > 10:
            shown += f" (+{len(self.stuck_jobs) - 10} more)"
        super().__init__(f"{message}: {shown}")


class EmptyMetricsError(SimulationError):
    category = "empty-metrics"


class InvariantViolation(ArcherError):
    category = "invariant"


class ReportError(ArcherError):
    category = "report"
