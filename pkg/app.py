import os
from dotenv import load_dotenv

# Load environment variables FIRST (CTRAK_OUT_DIR, CTRAK_LOG_LEVEL)
load_dotenv()

from logs import configure_logging

configure_logging(os.getenv("CTRAK_LOG_LEVEL", "INFO"))

from cli import main as cli_main


def main():
    try:
        cli_main()
    except KeyboardInterrupt:
        print("🛑 Stopped by user")
        raise SystemExit(130)


if __name__ == "__main__":
    main()
