import uvicorn

from xlstm_engine.config import config

if __name__ == "__main__":
    uvicorn.run(
        "xlstm_engine.main:app",
        host="0.0.0.0",
        port=8000,
        reload=False,
        log_level=config.LOG_LEVEL.lower()
    )
