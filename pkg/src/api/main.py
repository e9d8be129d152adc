#!/usr/bin/env python3
"""
FFTKF API - FastAPI layer over the analysis and privacy calculators

Endpoints:
    GET  /health                     - Service health check
    GET  /analysis/rho-star          - Effective noise fraction rho*
    GET  /analysis/noise-reduction   - (% noise removed, % bias inflation)
    POST /analysis/theorem2          - C1 and the utility-bound coefficients
    POST /privacy/calibrate          - Noise multiplier for a target (eps, delta)

Training is not exposed over HTTP.
"""

import logging
import math
from typing import Optional

from fastapi import FastAPI, HTTPException, Query
from pydantic import BaseModel, Field

from src import __version__
from src.pipeline.analysis import noise_reduction_report, rho_star, theorem2_constants
from src.tools.accountant import InfeasiblePrivacyTarget, calibrate_sigma, epsilon_for

logger = logging.getLogger(__name__)

app = FastAPI(
    title="FFTKF API",
    description="Spectral noise shaping and Kalman filtering calculators for private optimization",
    version=__version__,
)


# Request/Response Models
class HealthResponse(BaseModel):
    """Health check response"""
    status: str
    version: str


class RhoStarResponse(BaseModel):
    rho_star: float


class NoiseReductionResponse(BaseModel):
    reduction_pct: float
    bias_inflation_pct: float


class Theorem2Request(BaseModel):
    """Inputs of the utility bound; beta and L are supplied by the caller"""
    eta: float = Field(..., gt=0, description="Learning rate")
    kappa: float = Field(..., gt=0, le=1, description="Kalman gain")
    gamma: float = Field(1.0, ge=0, description="Finite-difference parameter")
    L: float = Field(..., gt=0, description="Smoothness constant")
    beta: float = Field(0.0, ge=0)
    rho: float = Field(0.5, ge=0, lt=1)
    lam: float = Field(0.5, gt=0, lt=1)
    d: Optional[int] = Field(None, ge=2)
    sigma_w: Optional[float] = Field(None, ge=0)


class Theorem2Response(BaseModel):
    eta: float
    kappa: float
    gamma: float
    L: float
    beta: float
    rho: float
    rho_star: float
    C1: float
    noise_coefficient: Optional[float]
    bias_coefficient: float
    dp_term_multiplier: float
    valid: bool


class CalibrateRequest(BaseModel):
    target_epsilon: float = Field(..., gt=0)
    target_delta: float = Field(..., gt=0, lt=1)
    q: float = Field(..., gt=0, le=1, description="Sampling rate B/N")
    steps: int = Field(..., ge=0)
    releases_per_step: int = Field(
        2, ge=1, le=2, description="2 for disk / fftkf (gradient + finite difference), 1 for dpsgd"
    )


class CalibrateResponse(BaseModel):
    noise_multiplier: float
    epsilon: float


@app.get("/health", response_model=HealthResponse)
async def health_check():
    """Check service health"""
    return HealthResponse(status="healthy", version=__version__)


@app.get("/analysis/rho-star", response_model=RhoStarResponse)
async def get_rho_star(
    lam: float = Query(..., gt=0, lt=1),
    rho: float = Query(..., ge=0, lt=1),
    d: Optional[int] = Query(None, ge=2),
):
    """rho* = (k0 + (1 - rho)^2 (d - k0)) / d; continuum limit without d"""
    return RhoStarResponse(rho_star=rho_star(lam, rho, d))


@app.get("/analysis/noise-reduction", response_model=NoiseReductionResponse)
async def get_noise_reduction(
    lam: float = Query(..., gt=0, lt=1),
    rho: float = Query(..., ge=0, lt=1),
):
    reduction, inflation = noise_reduction_report(lam, rho)
    return NoiseReductionResponse(reduction_pct=reduction, bias_inflation_pct=inflation)


@app.post("/analysis/theorem2", response_model=Theorem2Response)
async def post_theorem2(request: Theorem2Request):
    """
    Evaluate C1 and the bound coefficients.

    Example request:
    ```json
    {"eta": 0.01, "kappa": 0.5, "gamma": 1.0, "L": 1.0, "beta": 0.1}
    ```
    A non-positive C1 comes back with valid=false and a null noise coefficient.
    """
    constants = theorem2_constants(**request.model_dump())
    payload = constants.to_dict()
    if math.isnan(payload["noise_coefficient"]):
        payload["noise_coefficient"] = None
    return Theorem2Response(**payload)


@app.post("/privacy/calibrate", response_model=CalibrateResponse)
async def post_calibrate(request: CalibrateRequest):
    """Smallest noise multiplier meeting the target after `steps` steps."""
    try:
        z = calibrate_sigma(
            request.target_epsilon,
            request.target_delta,
            request.q,
            request.steps,
            releases_per_step=request.releases_per_step,
        )
    except InfeasiblePrivacyTarget as e:
        raise HTTPException(status_code=422, detail=str(e))
    eps = epsilon_for(request.q, z, request.steps, request.target_delta, request.releases_per_step)
    logger.info("Calibrated z=%.5g for eps=%s", z, request.target_epsilon)
    return CalibrateResponse(noise_multiplier=z, epsilon=eps)


if __name__ == "__main__":
    import uvicorn
    uvicorn.run(app, host="0.0.0.0", port=8000)
