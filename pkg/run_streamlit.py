#!/usr/bin/env python
"""Launch the results viewer headless (for remote boxes running the harness)."""
import os
import sys

import streamlit.web.cli as stcli

if __name__ == '__main__':
    port = int(os.environ.get('PORT', 8501))

    os.environ['STREAMLIT_SERVER_HEADLESS'] = 'true'
    os.environ['STREAMLIT_BROWSER_GATHER_USAGE_STATS'] = 'false'
    # The viewer reads the run directory from here
    os.environ.setdefault('FOCALCVAE_RUN_DIR', sys.argv[1] if len(sys.argv) > 1 else 'run')

    sys.argv = [
        'streamlit',
        'run',
        os.path.join(os.path.dirname(os.path.abspath(__file__)), 'app.py'),
        '--server.port', str(port),
        '--server.headless', 'true',
        '--browser.gatherUsageStats', 'false',
    ]

    sys.exit(stcli.main())
