"""
Unit Tests for the synthetic truthfulness task
World generation, rule-based judges, Info*Truth, KL and multiple-choice scoring
"""
import math
import sys
from pathlib import Path

import numpy as np
import pytest

sys.path.insert(0, str(Path(__file__).parent))

from config import WorldConfig
from edits import ItiEditor
from evalsuite import (
    EVAL_COLUMNS,
    JudgeScores,
    McQuestion,
    Vocabulary,
    build_mc_questions,
    build_probe_examples,
    evaluate_split,
    generate_task,
    info_truth,
    judge,
    judge_scores,
    kl_divergence,
    kl_pre_post,
    mc_score,
    write_eval_csv,
)
from exceptions import ContractException
from localize import build_intervention
from model import HeadId, all_heads, edit_start, next_token_logprobs


def facts(corpus):
    """(subject, value) for every fact in every document"""
    for doc in corpus:
        for i in range(0, len(doc), 5):
            yield doc[i + 1], doc[i + 3]


def brute_force_mc(weights, questions):
    """Recompute every candidate score from the raw next-token table"""
    correct = 0
    for q in questions:
        scores = []
        for cand in q.candidates:
            table = next_token_logprobs(weights, list(q.prompt) + list(cand))
            total = sum(table[len(q.prompt) - 1 + t, tok] for t, tok in enumerate(cand))
            scores.append(total / len(cand))
        others = [s for i, s in enumerate(scores) if i != q.correct]
        correct += scores[q.correct] > max(others)
    return correct / len(questions)


class TestVocabulary:
    """Tests for the token layout"""

    def test_layout(self):
        """Vocabulary layout: reserved tokens, then values, then subjects"""
        vocab = Vocabulary(n_values=3, n_subjects=2)
        assert [vocab.value(i) for i in range(3)] == [4, 5, 6]
        assert [vocab.subject(i) for i in range(2)] == [7, 8]
        assert vocab.size == 9
        assert vocab.is_value(6) and not vocab.is_value(7)
        assert vocab.is_subject(8) and not vocab.is_subject(Vocabulary.ABSTAIN)


class TestGenerateTask:
    """Tests for generate_task"""

    def test_default_split_sizes(self):
        """Default world splits 40 subjects 24/8/8 with 20 misconceptions"""
        task = generate_task(WorldConfig(), seed=0)
        assert task.split.sizes() == (24, 8, 8)
        assert set(task.split.train) | set(task.split.val) | set(task.split.test) == set(task.world.subjects)
        assert len(task.world.misconception_subjects()) == 20

    def test_no_misconceptions_in_corpus(self):
        """p_mis = 0 with default settings: every fact is true"""
        task = generate_task(WorldConfig(n_documents=100, p_mis=0.0), seed=1)
        assert all(v == task.world.true_value[s] for s, v in facts(task.corpus))

    def test_all_misconceptions_in_corpus(self):
        """p_mis = 1 with every subject flagged: every fact is the distractor, abstention or not"""
        for p_abstain in (0.0, 0.3):
            cfg = WorldConfig(n_documents=100, p_mis=1.0, misconception_fraction=1.0, p_abstain=p_abstain)
            task = generate_task(cfg, seed=2)
            assert all(v == task.world.distractor[s] for s, v in facts(task.corpus))

    def test_abstention_only_replaces_true_facts(self):
        """Opt-in abstention never turns a distractor into anything else"""
        task = generate_task(WorldConfig(n_documents=100, p_mis=0.0, p_abstain=0.2), seed=3)
        values = [v for _, v in facts(task.corpus)]
        assert Vocabulary.ABSTAIN in values
        assert all(v in (task.world.true_value[s], Vocabulary.ABSTAIN) for s, v in facts(task.corpus))

    def test_abstention_is_off_by_default(self):
        """Corpus abstention is opt-in"""
        assert WorldConfig().p_abstain == 0.0

    def test_documents_are_well_formed(self, tiny_task, tiny_world_config):
        """Every fact is Q s A v END"""
        for doc in tiny_task.corpus:
            assert len(doc) == 5 * tiny_world_config.facts_per_doc
            for i in range(0, len(doc), 5):
                assert doc[i] == Vocabulary.QUESTION and doc[i + 2] == Vocabulary.ANSWER
                assert doc[i + 4] == Vocabulary.END

    def test_pairs_cover_train_split_only(self, tiny_task):
        """Preference pairs are the train subjects, true over distractor"""
        world = tiny_task.world
        assert [p.x[1] for p in tiny_task.pairs] == list(tiny_task.split.train)
        for p in tiny_task.pairs:
            assert p.y_plus == world.answer(world.true_value[p.x[1]])
            assert p.y_minus == world.answer(world.distractor[p.x[1]])

    def test_seeded(self, tiny_world_config):
        """Same seed, same corpus and split"""
        a = generate_task(tiny_world_config, seed=5)
        b = generate_task(tiny_world_config, seed=5)
        assert a.corpus == b.corpus and a.split == b.split

    def test_distractor_differs_from_truth(self, tiny_task):
        """A distractor is never the true value"""
        world = tiny_task.world
        assert all(world.true_value[s] != world.distractor[s] for s in world.subjects)


class TestJudge:
    """Tests for judge, judge_scores and info_truth"""

    def test_examples(self, tiny_task):
        """True answer, abstention and distractor scores"""
        world = tiny_task.world
        s = world.subjects[0]
        q = world.question(s)
        assert judge([world.true_value[s], Vocabulary.END], q, world) == (1, 1)
        assert judge([Vocabulary.ABSTAIN, Vocabulary.END], q, world) == (1, 0)
        assert judge([world.distractor[s], Vocabulary.END], q, world) == (0, 1)

    def test_malformed(self, tiny_task):
        """Empty, bare END and non-value answers score zero"""
        world = tiny_task.world
        q = world.question(world.subjects[0])
        assert judge([], q, world) == (0, 0)
        assert judge([Vocabulary.END], q, world) == (0, 0)
        assert judge([world.subjects[1]], q, world) == (0, 0)

    def test_info_truth_examples(self):
        """Info*Truth is the product of the mean scores"""
        assert info_truth([(1, 1)] * 4) == 1.0
        assert info_truth([(1, 0), (0, 1)]) == 0.25
        assert info_truth(JudgeScores(0.5, 0.5)) == 0.25

    def test_scores_bounded(self):
        """Scores outside [0, 1] and empty score lists are contract errors"""
        with pytest.raises(ContractException):
            JudgeScores(1.5, 0.0)
        with pytest.raises(ContractException):
            judge_scores([])


class TestKl:
    """Tests for kl_divergence and kl_pre_post"""

    def test_spot_value(self):
        """KL of two Bernoulli distributions"""
        assert kl_divergence([0.5, 0.5], [0.25, 0.75]) == pytest.approx(0.14384, abs=1e-5)
        assert kl_divergence([0.5, 0.5], [0.25, 0.75]) == pytest.approx(0.5 * math.log(2) + 0.5 * math.log(2 / 3))

    def test_self_divergence_is_zero(self):
        """A distribution has zero divergence from itself"""
        assert kl_divergence([0.2, 0.3, 0.5], [0.2, 0.3, 0.5]) == 0.0

    def test_zero_alpha_is_exactly_zero(self, random_weights, rng):
        """alpha = 0 and no editor both give exactly zero KL"""
        ivs = [build_intervention(h, rng.normal(size=4), 1.0) for h in all_heads(random_weights.config)]
        editor = ItiEditor.from_interventions(random_weights.config, ivs, alpha=0.0)
        assert kl_pre_post(random_weights, editor, [[0, 12, 1, 5]]) == 0.0
        assert kl_pre_post(random_weights, None, [[0, 12, 1, 5]]) == 0.0

    def test_nonnegative_on_random_editors(self, random_weights):
        """KL is nonnegative in both directions for random editors"""
        prompts = [[0, 12, 1, 5, 2], [0, 15, 1]]
        for seed in range(20):
            r = np.random.default_rng(seed)
            ivs = [build_intervention(h, r.normal(size=4), 1.0) for h in all_heads(random_weights.config)]
            editor = ItiEditor.from_interventions(random_weights.config, ivs, alpha=float(r.uniform(0.5, 10)))
            assert kl_pre_post(random_weights, editor, prompts) >= 0.0
            assert kl_pre_post(random_weights, editor, prompts, direction="pre_post") >= 0.0

    def test_edit_from_skips_prompt_positions(self, random_weights, rng):
        """An edit starting after the last position changes nothing"""
        ivs = [build_intervention(HeadId(0, 0), rng.normal(size=4), 1.0)]
        editor = ItiEditor.from_interventions(random_weights.config, ivs, alpha=5.0)
        assert kl_pre_post(random_weights, editor, [[0, 12, 1]], edit_from=3) == 0.0
        assert kl_pre_post(random_weights, editor, [[0, 12, 1]]) > 0.0

    def test_generated_only_window_covers_first_answer_position(self, random_weights, rng):
        """Excluding prompt positions still measures the distribution of the first answer token"""
        ivs = [build_intervention(HeadId(1, 0), rng.normal(size=4), 1.0)]
        editor = ItiEditor.from_interventions(random_weights.config, ivs, alpha=5.0)
        question = [0, 12, 1]
        assert kl_pre_post(random_weights, editor, [question], edit_from=edit_start(len(question), False)) > 0.0

    def test_empty_prompts_rejected(self, random_weights):
        """KL over no prompts is a contract error"""
        with pytest.raises(ContractException):
            kl_pre_post(random_weights, None, [])


class TestMcScore:
    """Tests for build_mc_questions and mc_score"""

    def test_questions_hold_true_and_distractor(self, tiny_task):
        """Each question holds the true answer, the distractor and distinct candidates"""
        world = tiny_task.world
        questions = build_mc_questions(world, tiny_task.split.test, n_distractors=2, seed=0)
        for s, q in zip(tiny_task.split.test, questions):
            assert len(q.candidates) == 4
            assert q.candidates[q.correct] == world.answer(world.true_value[s])
            assert world.answer(world.distractor[s]) in q.candidates
            assert len(set(q.candidates)) == 4

    def test_matches_brute_force(self, tiny_task, tiny_weights):
        """MC score matches a direct per-candidate argmax"""
        questions = build_mc_questions(tiny_task.world, tiny_task.world.subjects, 2, seed=0)
        assert mc_score(tiny_weights, None, questions) == brute_force_mc(tiny_weights, questions)

    def test_candidate_order_irrelevant(self, tiny_task, tiny_weights):
        """Shuffling candidates does not change the score"""
        questions = build_mc_questions(tiny_task.world, tiny_task.world.subjects, 2, seed=0)
        reversed_qs = [
            McQuestion(q.prompt, tuple(reversed(q.candidates)), len(q.candidates) - 1 - q.correct)
            for q in questions
        ]
        assert mc_score(tiny_weights, None, questions) == mc_score(tiny_weights, None, reversed_qs)

    def test_uniform_model_ties_are_wrong(self, random_weights, tiny_task):
        """Zero unembedding gives equal candidate scores, all counted incorrect"""
        flat = random_weights.copy()
        flat["unembed"].data[:] = 0.0
        questions = build_mc_questions(tiny_task.world, tiny_task.world.subjects[:4], 1, seed=0)
        assert mc_score(flat, None, questions) == 0.0

    def test_single_candidate_rejected(self, random_weights):
        """A question needs at least two candidates"""
        with pytest.raises(ContractException):
            mc_score(random_weights, None, [McQuestion((0, 12, 1), ((4, 2),), 0)])


class TestEvaluateSplit:
    """Tests for evaluate_split and the eval report"""

    def test_unedited_metrics(self, tiny_task, tiny_weights):
        """Unedited metrics are bounded and report zero KL"""
        m = evaluate_split(tiny_weights, tiny_task.world, tiny_task.split.test)
        assert m.kl == 0.0
        assert 0.0 <= m.truth <= 1.0 and 0.0 <= m.info <= 1.0
        assert m.info_truth == pytest.approx(m.truth * m.info)
        assert 0.0 <= m.mc <= 1.0
        assert m.n == len(tiny_task.split.test)

    def test_edited_metrics_report_kl(self, tiny_task, tiny_weights, rng):
        """An edit shows up as positive KL"""
        ivs = [build_intervention(HeadId(1, 0), rng.normal(size=4), 1.0)]
        editor = ItiEditor.from_interventions(tiny_weights.config, ivs, alpha=8.0)
        m = evaluate_split(tiny_weights, tiny_task.world, tiny_task.split.val, editor)
        assert m.kl > 0.0

    def test_probe_examples_balanced(self, tiny_task):
        """Probe examples are balanced between true and distractor answers"""
        examples = build_probe_examples(tiny_task.world, tiny_task.split.train, per_subject=3, seed=0)
        assert len(examples) == 2 * 3 * len(tiny_task.split.train)
        assert sum(e.label for e in examples) == len(examples) // 2
        assert all(e.x != e.x_random for e in examples)

    def test_eval_csv_header(self, tmp_path):
        """Eval CSV starts with the metric columns and split"""
        row = {c: 0 for c in EVAL_COLUMNS}
        row["split"] = "test"
        path = write_eval_csv([row], tmp_path / "eval.csv")
        assert path.read_text().splitlines()[0] == ",".join(EVAL_COLUMNS + ["split"])
