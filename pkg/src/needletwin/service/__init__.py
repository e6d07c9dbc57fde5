"""Digital-twin service: wire protocol, TCP server, and client."""

from .client import PlanClient, ServiceError
from .server import CaseData, PlanServer, load_case

__all__ = ["PlanClient", "ServiceError", "CaseData", "PlanServer", "load_case"]
