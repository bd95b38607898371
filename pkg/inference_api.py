#!/usr/bin/env python3
"""
FastAPI service exposing per-node variational inference and whole-instance
prediction with a trained checkpoint
"""

from fastapi import FastAPI, HTTPException
from fastapi.middleware.cors import CORSMiddleware
from pydantic import BaseModel, Field
from typing import Dict, List, Optional, Tuple
from pathlib import Path
import logging
import os

import numpy as np

# Configure logging
logging.basicConfig(level=logging.INFO)
logger = logging.getLogger(__name__)

from errors import IwslError
from database_models import test_database_connection
from gumbel_sampler import DensityMode
from marginal_scores import compute_marginal_scores
from mlp_networks import ThetaParams, load_checkpoint
from scene_graph import instance_from_record
from structure_learning import readout_labels
from variational_inference import InferenceConfig, ReadoutMode, infer_instance, node_posterior, node_rng, readout

API_VERSION = "1.0.0"
CHECKPOINT_ENV = "IWSL_CHECKPOINT"

# Request/response models
class InferNodeRequest(BaseModel):
    """Marginal scores of one node plus sampler settings"""
    psi: List[float] = Field(..., min_length=1)
    samples_infer: int = Field(50, ge=1, le=100_000)
    tau: float = Field(1.0, gt=0.0)
    seed: int = Field(0, ge=0)
    density: DensityMode = DensityMode.PAPER

class InferNodeResponse(BaseModel):
    pi_star: List[float]
    bound: float
    surrogate_logit: List[float]
    log_posterior: List[float]
    posterior_label: int
    variational_label: int

class PredictRequest(BaseModel):
    """One instance in dataset-record form (labels may be placeholders)"""
    instance: dict
    samples_infer: int = Field(50, ge=1, le=100_000)
    seed: int = Field(0, ge=0)

class PredictResponse(BaseModel):
    object_labels: Dict[str, List[int]]
    predicate_labels: Dict[str, List[int]]
    bounds: List[float]
    tau: float

app = FastAPI(
    title="IWSL Scene Graph Inference API",
    description="Importance-weighted variational inference over scene-graph nodes",
    version=API_VERSION,
)

# Configure CORS
app.add_middleware(
    CORSMiddleware,
    allow_origins=["*"],
    allow_credentials=True,
    allow_methods=["*"],
    allow_headers=["*"],
)

_model_cache: Dict[str, Tuple[ThetaParams, float]] = {}

def get_model() -> Optional[Tuple[ThetaParams, float]]:
    """Checkpoint named by IWSL_CHECKPOINT, loaded once per path"""
    path = os.getenv(CHECKPOINT_ENV)
    if not path or not Path(path).is_file():
        return None
    if path not in _model_cache:
        _model_cache[path] = load_checkpoint(path)
        logger.info(f"Loaded checkpoint {path}")
    return _model_cache[path]

@app.get("/health")
async def health_check():
    """Health check endpoint for deployment monitoring"""
    try:
        model = get_model()
    except IwslError as e:
        logger.error(f"Checkpoint could not be loaded: {str(e)}")
        model = None
    return {
        "status": "healthy",
        "service": "iwsl-inference-api",
        "version": API_VERSION,
        "checkpoint_loaded": model is not None,
        "database": test_database_connection(),
    }

@app.post("/infer-node", response_model=InferNodeResponse)
async def infer_node_endpoint(request: InferNodeRequest):
    """Maximize the importance-weighted bound for one node and read out its label"""
    try:
        cfg = InferenceConfig(samples_infer=request.samples_infer, tau=request.tau,
                              density=request.density, seed=request.seed)
        posterior = node_posterior(np.array(request.psi), cfg, node_rng(request.seed, (), 0))
        return InferNodeResponse(
            pi_star=posterior.pi_star.tolist(),
            bound=posterior.bound,
            surrogate_logit=posterior.surrogate_logit.tolist(),
            log_posterior=posterior.log_posterior.tolist(),
            posterior_label=readout(posterior, ReadoutMode.POSTERIOR),
            variational_label=readout(posterior, ReadoutMode.VARIATIONAL),
        )
    except IwslError as e:
        logger.error(f"Error in /infer-node: {str(e)}")
        raise HTTPException(status_code=422, detail=str(e))

@app.post("/predict", response_model=PredictResponse)
async def predict(request: PredictRequest):
    """Label every node of an instance with the loaded checkpoint"""
    model = get_model()
    if model is None:
        raise HTTPException(status_code=503, detail=f"No checkpoint loaded; set {CHECKPOINT_ENV}")
    theta, tau = model
    try:
        inst = instance_from_record(request.instance)
        theta.check_widths(inst.feature_dim, theta["h_o"].out_dim, theta["h_p"].out_dim)
        cfg = InferenceConfig(samples_infer=request.samples_infer, tau=tau, seed=request.seed)
        posteriors = infer_instance(compute_marginal_scores(theta, inst), cfg)
    except (IwslError, KeyError, ValueError) as e:
        logger.error(f"Error in /predict: {str(e)}")
        raise HTTPException(status_code=422, detail=f"Invalid instance: {str(e)}")

    m = inst.graph.m
    labels = {mode.value: readout_labels(posteriors, mode) for mode in ReadoutMode}
    return PredictResponse(
        object_labels={mode: values[:m] for mode, values in labels.items()},
        predicate_labels={mode: values[m:] for mode, values in labels.items()},
        bounds=[p.bound for p in posteriors],
        tau=tau,
    )
