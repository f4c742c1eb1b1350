//! Prompt layout shared by training-example assembly and zero-shot eval.

use crate::contextgen::BridgingContext;

/// Renders the four prompt sections. Section text is what gets tokenized,
/// so any change here changes the training distribution.
#[derive(Debug, Clone)]
pub struct PromptTemplate {
    pub question_header: String,
    pub context_header: String,
    pub code_header: String,
    pub code_footer: String,
    pub tests_header: String,
    pub tests_footer: String,
}

impl Default for PromptTemplate {
    fn default() -> Self {
        PromptTemplate {
            question_header: "### Question\n".into(),
            context_header: "### Reasoning\n".into(),
            code_header: "### Solution\n```python\n".into(),
            code_footer: "\n```\n\n".into(),
            tests_header: "### Tests\n```python\n".into(),
            tests_footer: "\n```\n".into(),
        }
    }
}

impl PromptTemplate {
    pub fn render_question(&self, question: &str) -> String {
        format!("{}{}\n\n", self.question_header, question.trim_end())
    }

    /// Empty contexts render to an empty string: the segment vanishes but
    /// the surrounding ordering is preserved.
    pub fn render_context(&self, ctx: &BridgingContext) -> String {
        if ctx.is_empty() {
            return String::new();
        }
        let mut out = self.context_header.clone();
        out.push_str(&format!("Intent: {}\n", ctx.intent.trim()));
        if !ctx.steps.is_empty() {
            out.push_str("Steps:\n");
            for (i, step) in ctx.steps.iter().enumerate() {
                out.push_str(&format!("{}. {}\n", i + 1, step.trim()));
            }
        }
        if !ctx.formulas.is_empty() {
            out.push_str("Formulas:\n");
            for f in &ctx.formulas {
                out.push_str(&format!("- {}\n", f.trim()));
            }
        }
        if !ctx.edge_cases.is_empty() {
            out.push_str("Edge cases:\n");
            for e in &ctx.edge_cases {
                out.push_str(&format!("- {}\n", e.trim()));
            }
        }
        out.push('\n');
        out
    }

    pub fn render_code(&self, code: &str) -> String {
        format!("{}{}{}", self.code_header, code.trim_end(), self.code_footer)
    }

    pub fn render_tests(&self, tests: &[String]) -> String {
        format!(
            "{}{}{}",
            self.tests_header,
            tests
                .iter()
                .map(|t| t.trim_end())
                .collect::<Vec<_>>()
                .join("\n"),
            self.tests_footer
        )
    }

    pub fn render_full(
        &self,
        question: &str,
        ctx: &BridgingContext,
        code: &str,
        tests: &[String],
    ) -> String {
        format!(
            "{}{}{}{}",
            self.render_question(question),
            self.render_context(ctx),
            self.render_code(code),
            self.render_tests(tests)
        )
    }

    /// Zero-shot eval prompt: the question plus the opening of the code
    /// block, so generation starts inside a fence.
    pub fn eval_prompt(&self, question: &str) -> String {
        format!("{}{}", self.render_question(question), self.code_header)
    }
}
