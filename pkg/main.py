import os
import signal
import sys

import uvicorn


def signal_handler(sig, frame):
    print("\nShutting down gracefully...")
    sys.exit(0)


signal.signal(signal.SIGINT, signal_handler)
signal.signal(signal.SIGTERM, signal_handler)

if __name__ == "__main__":
    try:
        uvicorn.run(
            "app.main:app",
            host=os.getenv("CKSVAR_HOST", "127.0.0.1"),
            port=int(os.getenv("CKSVAR_PORT", "8000")),
            reload=False,
            log_level=os.getenv("CKSVAR_LOG_LEVEL", "info").lower(),
        )
    except KeyboardInterrupt:
        print("\nServer stopped.")
        sys.exit(0)
