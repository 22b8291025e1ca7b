import logging
from contextlib import asynccontextmanager

from fastapi import FastAPI, Request
from fastapi.middleware.cors import CORSMiddleware
from fastapi.responses import JSONResponse

from app.api.routes import router
from app.config import configure_logging, get_settings
from app.errors import CKSVARError, ConfigValidationError

logger = logging.getLogger(__name__)


@asynccontextmanager
async def lifespan(app: FastAPI):
    configure_logging()
    settings = get_settings()
    settings.data_dir.mkdir(parents=True, exist_ok=True)
    settings.output_dir.mkdir(parents=True, exist_ok=True)
    logger.info("elb-cksvar API ready: data in %s, artifacts in %s, %d workers",
                settings.data_dir, settings.output_dir, settings.workers)
    yield
    logger.info("elb-cksvar API shut down")


app = FastAPI(
    title="ELB CKSVAR API",
    description="Estimation, tests, identification and DSGE scenarios for censored and kinked SVARs",
    version="1.0.0",
    lifespan=lifespan,
)

app.add_middleware(
    CORSMiddleware,
    allow_origins=["*"],
    allow_credentials=True,
    allow_methods=["*"],
    allow_headers=["*"],
)


@app.exception_handler(CKSVARError)
async def cksvar_error_handler(request: Request, exc: CKSVARError):
    detail = {"problems": exc.problems} if isinstance(exc, ConfigValidationError) else str(exc)
    return JSONResponse(status_code=400, content={"detail": detail, "error": type(exc).__name__})


@app.get("/")
def read_root():
    return {"message": "ELB CKSVAR API is running", "docs": "/docs"}


@app.get("/health")
def health_check():
    return {"status": "healthy"}


app.include_router(router, prefix="/api")
