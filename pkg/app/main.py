"""Main module for initializing and running the FastAPI application."""

from __future__ import annotations

import uvicorn
from fastapi import FastAPI

from app.api.routers import router as app_router
from app.config_loader import get_config
from app.logging_config import configure_logging

configure_logging()

app = FastAPI(title="p-Laplace flow runs")
app.include_router(app_router)

if __name__ == "__main__":
    service = get_config()["service"]
    uvicorn.run(app, host=service["host"], port=service["port"])
