from setuptools import setup

# read the contents of your README file
from pathlib import Path
this_directory = Path(__file__).parent
long_description = (this_directory / "readme.md").read_text()


setup(
    name='nfclab',
    packages=['nfclab'],
    package_data={'nfclab': ['data/nci_params.txt']},
    version='0.1.0',
    license='MIT',
    description='nfclab is a hardware-free laboratory for NFC relay, replay and clone attacks with a lock case study and a relay latency benchmark.',
    long_description_content_type='text/markdown',
    long_description=long_description,
    author='nfclab developers',
    keywords=['nfc', 'relay attack', 'replay attack', 'iso 14443',
              'desfire', 'pcapng'],
    install_requires=[
        'numpy>=1.21.0',
        'pandas>=1.3.5',
        'scipy>=1.7.2',
        'scikit-learn>=1.0.2',
        'joblib>=1.0.1',
        'plotnine>=0.8.0',
        'pycryptodome>=3.15.0',
    ],
    entry_points={
        'console_scripts': ['nfclab=nfclab._cli:cli_main'],
    },
    classifiers=[
        'Development Status :: 3 - Alpha',
        'Intended Audience :: Science/Research',
        'Topic :: Security',
        'License :: OSI Approved :: MIT License',
        'Programming Language :: Python :: 3.8',
        'Programming Language :: Python :: 3.9',
        'Programming Language :: Python :: 3.10',
    ],
)
