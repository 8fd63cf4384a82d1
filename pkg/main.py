"""
FastAPI app: experiment status API.
"""
from __future__ import annotations

import logging

from fastapi import FastAPI

from config import LOG_LEVEL
from routers.experiments import router as experiments_router

logging.basicConfig(level=LOG_LEVEL)
logger = logging.getLogger(__name__)

app = FastAPI(title="SMPC Tightening API")
app.include_router(experiments_router)


@app.get("/")
def root() -> dict[str, str]:
    return {"message": "SMPC Tightening API", "docs": "/docs", "api": "/api/runs"}


if __name__ == "__main__":
    import uvicorn
    from config import API_HOST, API_PORT
    uvicorn.run(app, host=API_HOST, port=API_PORT)
