# Every key a configuration file may set, with its default value.

# Paths
ITEMS_PATH = 'data/toy/items.jsonl'
INTERACTIONS_PATH = 'data/toy/interactions.jsonl'
OUTPUT_FOLDER = 'outputs/slim'
SPLIT_FOLDER = None  # OUTPUT_FOLDER/split
CACHE_PATH = None  # OUTPUT_FOLDER/rationales.jsonl
EMBEDDINGS_PATH = None  # OUTPUT_FOLDER/embeddings.jsonl
CHECKPOINT_PATH = None  # OUTPUT_FOLDER/model.ckpt
REPORT_PATH = None  # OUTPUT_FOLDER/report.jsonl
DISTILL_PATH = None  # OUTPUT_FOLDER/distill.jsonl
POPULARITY_TABLE_PATH = None  # OUTPUT_FOLDER/popularity.csv
POPULARITY_PLOT_PATH = None  # OUTPUT_FOLDER/popularity.png
GROUPS_REPORT_PATH = None  # OUTPUT_FOLDER/groups.jsonl

# Endpoints (OpenAI-style)
TEACHER_BASE_URL = 'https://api.openai.com/v1'
TEACHER_MODEL = 'gpt-3.5-turbo'
TEACHER_API_KEY = None
TEACHER_API_KEY_ENV = 'OPENAI_API_KEY'
STUDENT_BASE_URL = 'http://localhost:8000/v1'
STUDENT_MODEL = 'slim-student'
STUDENT_API_KEY = None
STUDENT_API_KEY_ENV = 'OPENAI_API_KEY'
EMBEDDING_BASE_URL = 'https://api.openai.com/v1'
EMBEDDING_MODEL = 'text-embedding-3-small'
EMBEDDING_API_KEY = None
EMBEDDING_API_KEY_ENV = 'OPENAI_API_KEY'
MAX_TOKENS = 300
TEMPERATURE = 0.0
TIMEOUT = 60.0
MAX_RETRIES = 3
BACKOFF = 1.0
CONCURRENCY = 4

# Data preparation
K_CORE = 5
SUBSET_SIZE = 100
SUBSET_SEED = 0

# Prompt templates (None: packaged defaults)
TEACHER_TEMPLATE = None
STUDENT_TEMPLATE = None

# Text embeddings
EMBEDDING_PROVIDER = 'hash'  # hash | remote | file
EMBEDDING_FILE = None  # precomputed store for the file provider
EMBEDDING_DIM = 768
HASH_NGRAMS = (1, 2)
HASH_SEED = 0
EMBEDDING_BATCH_SIZE = 100
RATIONALE_STEP = 'all'  # 1 | 2 | 3 | all
RATIONALE_SOURCE = 'student'  # teacher | student

# Recommender
MODE = 'slim'  # id | id-text | slim | agnostic
BACKBONE = 'mean'  # mean | gru | attention
EMBED_DIM = 64
MAX_SEQ_LEN = 50
LEARNING_RATE = 0.01
EPOCHS = 10
NEGATIVES = 1
BATCH_SIZE = 64
SEED = 0
PAIRS = 'all-prefixes'  # all-prefixes | last-only
BACKBONE_INPUT = 'fused'  # fused | id
OPTIMIZER = 'sgd'  # sgd | adam

# Evaluation
TOP_K = (10, 20)
EVAL_NEGATIVES = 100
RUNS = 1
N_GROUPS = 5
POPULARITY_K = 10
WORKERS = 1

# Distillation corpus
DISTILL_LIMIT = None
DISTILL_HOLDOUT = 0.0
STUDENT_ALPHA = 0.1
