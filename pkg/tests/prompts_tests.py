import logging
import os
import sys
import unittest

import pyslim.prompts
from pyslim.dataset import BehaviorSequence, Item


ITEMS = {
    'i1': Item('i1', 'Elden Ring', 'Games', 'Bandai'),
    'i2': Item('i2', 'Green Tea', 'Food'),
    'i3': Item('i3', 'Puzzle Cube'),
}


class Test(unittest.TestCase):

    OUTPUT_FOLDER = r'./outputs/prompts_tests'

    @classmethod
    def setUpClass(cls):
        super(Test, cls).setUpClass()
        os.makedirs(cls.OUTPUT_FOLDER, exist_ok=True)

    def setUp(self):
        logger = logging.getLogger()
        stdout_handler = logging.StreamHandler(sys.stdout)
        stdout_handler.setLevel(logging.DEBUG)
        logger.addHandler(stdout_handler)
        logger.setLevel(logging.DEBUG)
        logger.info('-' * 80)
        self._stdout_handler = stdout_handler

    def tearDown(self):
        logger = logging.getLogger()
        logger.removeHandler(self._stdout_handler)

    def testRenderTeacher(self):
        logger = logging.getLogger()
        logger.info('testRenderTeacher')

        seq = BehaviorSequence('u1', ('i1', 'i2', 'i3'))
        prompt = pyslim.prompts.render_teacher_prompt(seq, ITEMS)
        logger.info('%s', prompt.text)
        self.assertEqual(prompt.user, 'u1')
        self.assertEqual(prompt.template_kind, pyslim.prompts.TEACHER)
        self.assertIn('1. Elden Ring (category: Games, brand: Bandai)', prompt.text)
        self.assertIn('2. Green Tea (category: Food)', prompt.text)
        self.assertIn('3. Puzzle Cube\n', prompt.text)
        for instruction in pyslim.prompts.TEACHER_STEPS:
            self.assertIn(instruction, prompt.text)
        self.assertLess(prompt.text.index('Elden Ring'), prompt.text.index('Puzzle Cube'))

    def testListingRecoversItems(self):
        logger = logging.getLogger()
        logger.info('testListingRecoversItems')

        seq = BehaviorSequence('u1', ('i3', 'i1', 'i2'))
        for kind in (pyslim.prompts.TEACHER, pyslim.prompts.STUDENT):
            template = pyslim.prompts.load_template(None, kind)
            prompt = pyslim.prompts.render_prompt(template, seq, ITEMS)
            listing = pyslim.prompts.parse_item_listing(prompt.text)
            expected = [(ITEMS[key].title, ITEMS[key].category, ITEMS[key].brand) for key in seq.items]
            self.assertEqual(listing, expected)

    def testStudentIsSimpler(self):
        logger = logging.getLogger()
        logger.info('testStudentIsSimpler')

        teacher = pyslim.prompts.load_template(None, pyslim.prompts.TEACHER)
        student = pyslim.prompts.load_template(None, pyslim.prompts.STUDENT)
        self.assertTrue(pyslim.prompts.check_simplification(teacher, student))
        with self.assertRaises(pyslim.prompts.PromptError):
            pyslim.prompts.check_simplification(student, teacher)

    def testRenderErrors(self):
        logger = logging.getLogger()
        logger.info('testRenderErrors')

        with self.assertRaises(pyslim.prompts.PromptError):
            pyslim.prompts.render_student_prompt(BehaviorSequence('u1', ()), ITEMS)
        with self.assertRaises(pyslim.prompts.PromptError):
            pyslim.prompts.render_student_prompt(BehaviorSequence('u1', ('i1', 'i9')), ITEMS)
        with self.assertRaises(pyslim.prompts.PromptError):
            pyslim.prompts.PromptTemplate(pyslim.prompts.STUDENT, 'no items here {step1} {step2} {step3}',
                                          pyslim.prompts.STUDENT_STEPS)
        with self.assertRaises(pyslim.prompts.PromptError):
            pyslim.prompts.PromptTemplate(pyslim.prompts.STUDENT, '{items} {step1} {step2}',
                                          pyslim.prompts.STUDENT_STEPS)

    def testCustomTemplate(self):
        logger = logging.getLogger()
        logger.info('testCustomTemplate')

        path = os.path.join(self.OUTPUT_FOLDER, 'custom.txt')
        with open(path, 'wt', encoding='utf-8') as stream:
            stream.write('Bought:\n{items}\n{step1}|{step2}|{step3}\n')
        template = pyslim.prompts.load_template(path, pyslim.prompts.STUDENT)
        prompt = pyslim.prompts.render_prompt(template, BehaviorSequence('u2', ('i2',)), ITEMS)
        self.assertEqual(prompt.text, 'Bought:\n1. Green Tea (category: Food)\n{}|{}|{}\n'
                         .format(*pyslim.prompts.STUDENT_STEPS))

    def testParseRationale(self):
        logger = logging.getLogger()
        logger.info('testParseRationale')

        raw = 'Step 1: Likes games.\nStep 2: Games, Bandai.\nStep 3: Elden Ring DLC.'
        rationale = pyslim.prompts.parse_rationale('u1', raw)
        self.assertEqual(rationale.step1, 'Likes games.')
        self.assertEqual(rationale.step2, 'Games, Bandai.')
        self.assertEqual(rationale.step3, 'Elden Ring DLC.')
        self.assertEqual(rationale.raw, raw)

        decorated = 'Sure!\n**Step 1:** Likes games.\n\n**STEP 2:** Games.\n**step 3**: Hades.'
        rationale = pyslim.prompts.parse_rationale('u1', decorated)
        self.assertEqual((rationale.step1, rationale.step2, rationale.step3), ('Likes games.', 'Games.', 'Hades.'))

        formatted = pyslim.prompts.format_rationale('a', 'b', 'c')
        self.assertEqual(pyslim.prompts.parse_rationale('u1', formatted)[1:4], ('a', 'b', 'c'))

    def testParseRationaleErrors(self):
        logger = logging.getLogger()
        logger.info('testParseRationaleErrors')

        cases = (
            ('', 1),
            ('Step 1: a\nStep 3: c', 2),
            ('Step 2: b\nStep 1: a\nStep 3: c', 2),
            ('Step 1: a\nStep 2:\nStep 3: c', 2),
            ('Step 1: a\nStep 2: b\nStep 3:   ', 3),
        )
        for raw, step in cases:
            with self.assertRaises(pyslim.prompts.RationaleParseError) as context:
                pyslim.prompts.parse_rationale('u1', raw)
            logger.info('%r -> %s', raw, context.exception)
            self.assertEqual(context.exception.step, step)

    def testStepText(self):
        logger = logging.getLogger()
        logger.info('testStepText')

        rationale = pyslim.prompts.Rationale('u1', 'one', 'two', 'three', '')
        self.assertEqual(pyslim.prompts.rationale_step_text(rationale, 2), 'two')
        self.assertEqual(pyslim.prompts.rationale_step_text(rationale, '3'), 'three')
        self.assertEqual(pyslim.prompts.rationale_step_text(rationale, 'all'), 'one\ntwo\nthree')
        with self.assertRaises(ValueError):
            pyslim.prompts.rationale_step_text(rationale, 4)


if __name__ == "__main__":
    unittest.main()
