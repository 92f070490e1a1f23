#include "privsim/report.hpp"

#include <algorithm>

#include <fmt/format.h>

#include "privsim/digest.hpp"
#include "privsim/prompts.hpp"

namespace privsim {

std::string format_number(double v) { return fmt::format("{:.6f}", v); }

std::string format_number(const std::optional<double>& v) { return v ? format_number(*v) : std::string{}; }

namespace {

std::string csv_field(const std::string& s) {
    if (s.find_first_of(",\"\n\r") == std::string::npos) return s;
    std::string out = "\"";
    for (char c : s) {
        if (c == '"') out += '"';
        out += c;
    }
    return out + '"';
}

std::string xml_escape(const std::string& s) {
    std::string out;
    for (char c : s) {
        switch (c) {
            case '&': out += "&amp;"; break;
            case '<': out += "&lt;"; break;
            case '>': out += "&gt;"; break;
            case '"': out += "&quot;"; break;
            default: out += c;
        }
    }
    return out;
}

}  // namespace

std::string to_csv(const Table& t) {
    std::string out;
    auto line = [&out](const std::vector<std::string>& cells) {
        for (std::size_t i = 0; i < cells.size(); ++i) {
            if (i) out += ',';
            out += csv_field(cells[i]);
        }
        out += '\n';
    };
    line(t.header);
    for (const auto& r : t.rows) line(r);
    return out;
}

void write_csv(const std::filesystem::path& path, const Table& t) { write_file(path, to_csv(t)); }

Table summary_table(const FidelityReport& report, std::span<const std::string> metrics) {
    Table t;
    t.header.push_back("condition");
    for (const auto& m : metrics) {
        t.header.push_back(m);
        t.header.push_back(m + "_lo");
        t.header.push_back(m + "_hi");
    }
    t.header.insert(t.header.end(), {"respondents", "questions", "questions_skipped", "parse_failure_rate"});
    for (const auto& c : report.conditions) {
        std::vector<std::string> row{c.condition};
        for (const auto& m : metrics) {
            const auto mv = c.metric(m);
            row.push_back(mv ? format_number(mv->value) : "");
            row.push_back(mv && mv->ci ? format_number(mv->ci->lo) : "");
            row.push_back(mv && mv->ci ? format_number(mv->ci->hi) : "");
        }
        row.push_back(std::to_string(c.per_respondent_acc.size()));
        row.push_back(std::to_string(c.per_question.size()));
        row.push_back(std::to_string(c.questions_skipped));
        row.push_back(format_number(c.parse_failure_rate()));
        t.rows.push_back(std::move(row));
    }
    return t;
}

Table per_question_table(const FidelityReport& report) {
    Table t{{"condition", "question_id", "n_truth", "n_pred", "tvd", "tv_complement", "mee", "wd"}, {}};
    for (const auto& c : report.conditions) {
        for (const auto& q : c.per_question) {
            t.rows.push_back({c.condition, q.question_id, std::to_string(q.n_truth), std::to_string(q.n_pred),
                              format_number(q.tvd), format_number(q.tv_complement), format_number(q.mee),
                              format_number(q.wd)});
        }
    }
    return t;
}

Table token_table(std::span<const TokenRow> rows) {
    Table t{{"dataset", "tokenizer", "Raw", "Narrative", "%Reduction"}, {}};
    for (const auto& r : rows) {
        t.rows.push_back({r.dataset, r.tokenizer, fmt::format("{:.2f}", r.raw), fmt::format("{:.2f}", r.narrative),
                          fmt::format("{:.2f}", percent_reduction(r.raw, r.narrative))});
    }
    return t;
}

Table best_template_table(std::span<const TemplateShare> shares) {
    Table t{{"template", "wins", "fraction"}, {}};
    for (const auto& s : shares) t.rows.push_back({s.templ, std::to_string(s.wins), format_number(s.fraction)});
    return t;
}

Table sweep_table(std::span<const SweepPoint> points) {
    Table t{{"I", "acc", "tv_complement", "tv_complement_lo", "tv_complement_hi", "mee", "wd"}, {}};
    for (const auto& p : points) {
        const auto& r = p.report;
        t.rows.push_back({std::to_string(p.iterations), r.acc ? format_number(r.acc->value) : "",
                          r.tv_complement ? format_number(r.tv_complement->value) : "",
                          r.tv_complement && r.tv_complement->ci ? format_number(r.tv_complement->ci->lo) : "",
                          r.tv_complement && r.tv_complement->ci ? format_number(r.tv_complement->ci->hi) : "",
                          r.mee ? format_number(r.mee->value) : "", r.wd ? format_number(r.wd->value) : ""});
    }
    return t;
}

std::string bar_chart_svg(const std::string& title, const std::string& y_label, std::span<const Bar> bars,
                          double y_max) {
    constexpr double kLeft = 70, kTop = 40, kPlotH = 260, kBarW = 60, kGap = 30, kBottom = 70;
    const double plot_w = std::max(1.0, static_cast<double>(bars.size())) * (kBarW + kGap) + kGap;
    const double width = kLeft + plot_w + 20;
    const double height = kTop + kPlotH + kBottom;
    if (y_max <= 0) y_max = 1.0;
    auto y = [&](double v) { return kTop + kPlotH * (1.0 - std::clamp(v / y_max, 0.0, 1.0)); };

    std::string s = fmt::format(
        "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{:.0f}\" height=\"{:.0f}\" font-family=\"sans-serif\" "
        "font-size=\"12\">\n",
        width, height);
    s += fmt::format("<rect width=\"{:.0f}\" height=\"{:.0f}\" fill=\"white\"/>\n", width, height);
    s += fmt::format("<text x=\"{:.1f}\" y=\"22\" text-anchor=\"middle\" font-size=\"15\">{}</text>\n", width / 2,
                     xml_escape(title));
    s += fmt::format("<text x=\"16\" y=\"{:.1f}\" transform=\"rotate(-90 16 {:.1f})\" text-anchor=\"middle\">{}</text>\n",
                     kTop + kPlotH / 2, kTop + kPlotH / 2, xml_escape(y_label));
    for (int k = 0; k <= 4; ++k) {
        const double v = y_max * k / 4.0;
        s += fmt::format("<line x1=\"{:.1f}\" y1=\"{:.1f}\" x2=\"{:.1f}\" y2=\"{:.1f}\" stroke=\"#ddd\"/>\n", kLeft,
                         y(v), kLeft + plot_w, y(v));
        s += fmt::format("<text x=\"{:.1f}\" y=\"{:.1f}\" text-anchor=\"end\">{:.2f}</text>\n", kLeft - 6, y(v) + 4, v);
    }
    s += fmt::format("<line x1=\"{0:.1f}\" y1=\"{1:.1f}\" x2=\"{0:.1f}\" y2=\"{2:.1f}\" stroke=\"black\"/>\n", kLeft,
                     kTop, kTop + kPlotH);
    for (std::size_t i = 0; i < bars.size(); ++i) {
        const auto& b = bars[i];
        const double x = kLeft + kGap + static_cast<double>(i) * (kBarW + kGap);
        s += fmt::format("<rect x=\"{:.1f}\" y=\"{:.1f}\" width=\"{:.1f}\" height=\"{:.1f}\" fill=\"#4878a8\"/>\n", x,
                         y(b.value), kBarW, kTop + kPlotH - y(b.value));
        if (b.ci) {
            const double cx = x + kBarW / 2;
            s += fmt::format(
                "<path d=\"M{0:.1f} {1:.1f}V{2:.1f}M{3:.1f} {1:.1f}H{4:.1f}M{3:.1f} {2:.1f}H{4:.1f}\" stroke=\"black\" "
                "fill=\"none\"/>\n",
                cx, y(b.ci->lo), y(b.ci->hi), cx - 8, cx + 8);
        }
        s += fmt::format("<text x=\"{:.1f}\" y=\"{:.1f}\" text-anchor=\"middle\">{}</text>\n", x + kBarW / 2,
                         kTop + kPlotH + 18, xml_escape(b.label));
        s += fmt::format("<text x=\"{:.1f}\" y=\"{:.1f}\" text-anchor=\"middle\" font-size=\"10\">{:.3f}</text>\n",
                         x + kBarW / 2, y(b.value) - 4, b.value);
    }
    s += "</svg>\n";
    return s;
}

}  // namespace privsim
