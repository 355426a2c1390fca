import os

BASE_DIR = os.path.abspath(os.path.dirname(__file__))

class Config:
    DATA_DIR = os.environ.get('ANTKIT_DATA_DIR', os.path.join(BASE_DIR, 'data'))
    CHECKPOINT_DIR = os.environ.get('ANTKIT_CHECKPOINT_DIR', os.path.join(BASE_DIR, 'checkpoints'))
    LOG_LEVEL = os.environ.get('ANTKIT_LOG_LEVEL', 'WARNING')
    DEFAULT_SEED = int(os.environ.get('ANTKIT_SEED', '0'))
    SPECS_DIR = os.path.join(BASE_DIR, 'specs')
    FIXTURES_DIR = os.path.join(BASE_DIR, 'fixtures')
    TEMPLATES_DIR = os.path.join(BASE_DIR, 'templates')
    LITERATURE_FIXTURE = os.path.join(FIXTURES_DIR, 'literature.json')
    CIFAR_TRAIN_FILE = 'train.bin'
    CIFAR_TEST_FILE = 'test.bin'
