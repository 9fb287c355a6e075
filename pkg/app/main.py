import logging
from contextlib import asynccontextmanager

from fastapi import FastAPI
from fastapi.middleware.cors import CORSMiddleware

from app import db
from app.routes import experiments, runs

logger = logging.getLogger(__name__)


@asynccontextmanager
async def lifespan(application: FastAPI):
    db.init_db()
    yield


app = FastAPI(
    title="Duplex Training Simulator",
    description="Data lifetime, refresh and TTA / ETA modeling of reversible duplex training on eDRAM accelerators",
    version="1.0.0",
    lifespan=lifespan,
)

app.add_middleware(
    CORSMiddleware,
    allow_origins=["*"],
    allow_methods=["*"],
    allow_headers=["*"],
)

app.include_router(experiments.router)
app.include_router(runs.router)


@app.get("/")
async def root():
    return {"service": app.title, "version": app.version}
