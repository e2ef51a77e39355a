import collections
import os
import re


TEMPLATES_FOLDER = os.path.join(os.path.dirname(os.path.abspath(__file__)), 'templates')

TEACHER = 'teacher'
STUDENT = 'student'

TEACHER_STEPS = (
    'Summarize user preferences based on the historical behavior sequences.',
    'Recommend categories or brands to the user based on the summarized preferences.',
    'Recommend products that align with the recommended categories/brands.',
)

STUDENT_STEPS = (
    'Summarize the user preferences.',
    'Recommend categories or brands.',
    'Recommend products.',
)

ITEM_LINE_FORMAT = '{index}. {title}{attributes}'
ITEMS_PLACEHOLDER = '{items}'
STEP_PLACEHOLDERS = ('{step1}', '{step2}', '{step3}')

STEP_LABEL_REGEX = re.compile(r'(?:\*\*|__)?\s*step\s*([1-3])\s*(?:\*\*|__)?\s*:\s*(?:\*\*|__)?',
                              re.IGNORECASE)
ITEM_LINE_REGEX = re.compile(r'^\s*(\d+)\.\s+(.*?)(?:\s+\((category: .*|brand: .*)\))?\s*$')

STEP_SELECTORS = (1, 2, 3, 'all')


RenderedPrompt = collections.namedtuple('RenderedPrompt', 'user text template_kind')

Rationale = collections.namedtuple('Rationale', 'user step1 step2 step3 raw')


class PromptError(ValueError):
    pass


class RationaleParseError(ValueError):

    def __init__(self, step, message):
        super().__init__('Step {}: {}'.format(step, message))
        self.step = step


class PromptTemplate(object):

    def __init__(self, kind, body, step_instructions, item_line_format=ITEM_LINE_FORMAT):
        if kind not in (TEACHER, STUDENT):
            raise PromptError('unknown template kind: {!r}'.format(kind))
        step_instructions = tuple(step_instructions)
        if len(step_instructions) != 3:
            raise PromptError('a template needs exactly 3 step instructions')
        if body.count(ITEMS_PLACEHOLDER) != 1:
            raise PromptError('template must contain {} exactly once'.format(ITEMS_PLACEHOLDER))
        for placeholder in STEP_PLACEHOLDERS:
            if placeholder not in body:
                raise PromptError('template lacks {}'.format(placeholder))

        self.kind = kind
        self.body = body
        self.step_instructions = step_instructions
        self.item_line_format = item_line_format

    @property
    def header(self):
        return self.body[:self.body.index(ITEMS_PLACEHOLDER)]

    def render_items(self, items):
        lines = []
        for index, item in enumerate(items, 1):
            attributes = []
            if item.category:
                attributes.append('category: {}'.format(item.category))
            if item.brand:
                attributes.append('brand: {}'.format(item.brand))
            attributes = ' ({})'.format(', '.join(attributes)) if attributes else ''
            lines.append(self.item_line_format.format(index=index, title=item.title, attributes=attributes))
        return '\n'.join(lines)

    def render(self, items):
        text = self.body.replace(ITEMS_PLACEHOLDER, self.render_items(items))
        for placeholder, instruction in zip(STEP_PLACEHOLDERS, self.step_instructions):
            text = text.replace(placeholder, instruction)
        return text


def load_template(path, kind):
    if path is None:
        path = os.path.join(TEMPLATES_FOLDER, '{}.txt'.format(kind))
    with open(path, 'rt', encoding='utf-8') as stream:
        body = stream.read()
    steps = TEACHER_STEPS if kind == TEACHER else STUDENT_STEPS
    return PromptTemplate(kind, body, steps)


def check_simplification(teacher, student):
    if teacher.kind != TEACHER or student.kind != STUDENT:
        raise PromptError('expected a teacher and a student template')
    if len(student.header) >= len(teacher.header):
        raise PromptError('student header must be shorter than the teacher header')
    return True


def resolve_items(seq, items):
    if not seq.items:
        raise PromptError('empty behavior sequence for user {!r}'.format(seq.user))
    resolved = []
    for key in seq.items:
        try:
            resolved.append(items[key])
        except KeyError:
            raise PromptError('unresolvable item {!r} for user {!r}'.format(key, seq.user))
    return resolved


def render_prompt(template, seq, items):
    text = template.render(resolve_items(seq, items))
    return RenderedPrompt(seq.user, text, template.kind)


def render_teacher_prompt(seq, items, template=None):
    if template is None:
        template = load_template(None, TEACHER)
    return render_prompt(template, seq, items)


def render_student_prompt(seq, items, template=None):
    if template is None:
        template = load_template(None, STUDENT)
    return render_prompt(template, seq, items)


def parse_item_listing(text):
    listing = []
    for line in text.splitlines():
        match = ITEM_LINE_REGEX.match(line)
        if match:
            index, title, attributes = match.groups()
            fields = {}
            for part in (attributes or '').split(', '):
                key, sep, value = part.partition(': ')
                if sep:
                    fields[key] = value
            listing.append((title, fields.get('category'), fields.get('brand')))
    return listing


def parse_rationale(user, raw):
    if not raw or not raw.strip():
        raise RationaleParseError(1, 'empty completion')

    positions = {}
    for match in STEP_LABEL_REGEX.finditer(raw):
        step = int(match.group(1))
        if step not in positions:
            positions[step] = (match.start(), match.end())

    for step in (1, 2, 3):
        if step not in positions:
            raise RationaleParseError(step, 'missing label')
    for step in (2, 3):
        if positions[step][0] < positions[step - 1][0]:
            raise RationaleParseError(step, 'label out of order')

    bodies = []
    for step in (1, 2, 3):
        start = positions[step][1]
        stop = positions[step + 1][0] if step < 3 else len(raw)
        body = raw[start:stop].strip()
        if not body:
            raise RationaleParseError(step, 'empty body')
        bodies.append(body)
    return Rationale(user, bodies[0], bodies[1], bodies[2], raw)


def format_rationale(step1, step2, step3):
    return 'Step 1: {}\nStep 2: {}\nStep 3: {}'.format(step1, step2, step3)


def rationale_step_text(r, step):
    if isinstance(step, str) and step.isdigit():
        step = int(step)
    if step not in STEP_SELECTORS:
        raise ValueError('invalid step selector: {!r}'.format(step))
    if step == 'all':
        return '\n'.join((r.step1, r.step2, r.step3))
    return (r.step1, r.step2, r.step3)[step - 1]
