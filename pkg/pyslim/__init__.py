__all__ = ('backbones', 'cli', 'dataset', 'distill', 'embed', 'evaluation', 'graphics', 'llm', 'models',
           'persistence', 'prompts', 'synthetic', 'utils')
