#include "famp/render.hpp"

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdio>
#include <sstream>

#include "famp/mathutil.hpp"

namespace famp::harness {

namespace {

constexpr int kCell = 40;
constexpr int kMargin = 24;
constexpr int kGap = 30;

constexpr std::array<const char*, 16> kPalette = {"#1f77b4", "#ff7f0e", "#2ca02c", "#d62728", "#9467bd", "#8c564b",
                                                  "#e377c2", "#7f7f7f", "#bcbd22", "#17becf", "#aec7e8", "#ffbb78",
                                                  "#98df8a", "#ff9896", "#c5b0d5", "#c49c94"};

std::string option_color(std::size_t w, std::size_t N) {
  if (N <= kPalette.size()) return kPalette[w];
  char buf[32];
  std::snprintf(buf, sizeof buf, "hsl(%d,65%%,45%%)", static_cast<int>(360 * w / N));
  return buf;
}

struct Panel {
  int x0, y0;
  const envs::TaxiMap& map;
  int px(int col) const { return x0 + col * kCell; }
  int py(int row) const { return y0 + row * kCell; }
};

void grid(std::ostream& os, const Panel& p, const std::string& title) {
  const int w = p.map.width() * kCell, h = p.map.height() * kCell;
  os << "<text x=\"" << p.x0 << "\" y=\"" << p.y0 - 8 << "\" font-size=\"13\">" << title << "</text>\n";
  for (int r = 0; r < p.map.height(); ++r)
    for (int c = 0; c < p.map.width(); ++c)
      os << "<rect x=\"" << p.px(c) << "\" y=\"" << p.py(r) << "\" width=\"" << kCell << "\" height=\"" << kCell
         << "\" fill=\"none\" stroke=\"#cccccc\"/>\n";
  os << "<rect x=\"" << p.x0 << "\" y=\"" << p.y0 << "\" width=\"" << w << "\" height=\"" << h
     << "\" fill=\"none\" stroke=\"#000000\" stroke-width=\"3\"/>\n";
}

void decorations(std::ostream& os, const Panel& p) {
  for (const envs::Wall& wl : p.map.walls()) {
    int x1, y1, x2, y2;
    if (wl.a.row == wl.b.row) {
      const int x = p.px(std::max(wl.a.col, wl.b.col));
      x1 = x2 = x;
      y1 = p.py(wl.a.row);
      y2 = y1 + kCell;
    } else {
      const int y = p.py(std::max(wl.a.row, wl.b.row));
      y1 = y2 = y;
      x1 = p.px(wl.a.col);
      x2 = x1 + kCell;
    }
    os << "<line x1=\"" << x1 << "\" y1=\"" << y1 << "\" x2=\"" << x2 << "\" y2=\"" << y2
       << "\" stroke=\"#000000\" stroke-width=\"4\"/>\n";
  }
  for (const envs::Special& s : p.map.specials())
    os << "<text x=\"" << p.px(s.cell.col) + 3 << "\" y=\"" << p.py(s.cell.row) + 12
       << "\" font-size=\"11\" font-weight=\"bold\">" << static_cast<char>(std::toupper(s.color[0])) << "</text>\n";
}

void glyph(std::ostream& os, int cx, int cy, int action, const std::string& color) {
  const int a = 11;
  switch (action) {
    case 0:
      os << "<polygon points=\"" << cx << "," << cy - a << " " << cx - a << "," << cy + a << " " << cx + a << ","
         << cy + a << "\"";
      break;
    case 1:
      os << "<polygon points=\"" << cx << "," << cy + a << " " << cx - a << "," << cy - a << " " << cx + a << ","
         << cy - a << "\"";
      break;
    case 2:
      os << "<polygon points=\"" << cx - a << "," << cy << " " << cx + a << "," << cy - a << " " << cx + a << ","
         << cy + a << "\"";
      break;
    case 3:
      os << "<polygon points=\"" << cx + a << "," << cy << " " << cx - a << "," << cy - a << " " << cx - a << ","
         << cy + a << "\"";
      break;
    case 4:
      os << "<rect x=\"" << cx - 9 << "\" y=\"" << cy - 9 << "\" width=\"18\" height=\"18\"";
      break;
    default:
      os << "<circle cx=\"" << cx << "\" cy=\"" << cy << "\" r=\"5\"";
      break;
  }
  os << " fill=\"" << color << "\"/>\n";
}

std::string header(int w, int h) {
  std::ostringstream os;
  os << "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"" << w << "\" height=\"" << h << "\" viewBox=\"0 0 " << w
     << " " << h << "\" font-family=\"sans-serif\">\n<rect width=\"" << w << "\" height=\"" << h
     << "\" fill=\"#ffffff\"/>\n";
  return os.str();
}

}  // namespace

std::string term_color(double xi) {
  const int level = static_cast<int>(std::lround(255.0 * (1.0 - std::clamp(xi, 0.0, 1.0))));
  char buf[8];
  std::snprintf(buf, sizeof buf, "#%02x%02x%02x", level, level, level);
  return buf;
}

std::string render_option_map(const policy::HierParams& params, const envs::TaxiTask& task,
                              std::span<const iopg::Trajectory> trajs, const policy::TerminationMode& mode) {
  const envs::TaxiMap& map = task.layout();
  const std::size_t N = params.dims.N;
  const int cells = map.cell_count();
  // per state: last action and its option, -1 when unvisited
  std::vector<int> act(2 * cells, -1), opt(2 * cells, -1);
  for (const iopg::Trajectory& tr : trajs) {
    ad::Tape tape;
    const auto v = policy::on_tape(tape, params, {false, false, false});
    const auto resp = iopg::responsibilities(tr, v, mode).array().data;
    for (std::size_t t = 0; t < tr.length(); ++t) {
      const auto row = resp.begin() + static_cast<std::ptrdiff_t>(t * N);
      act[tr.states[t]] = static_cast<int>(tr.actions[t]);
      opt[tr.states[t]] = static_cast<int>(std::max_element(row, row + static_cast<std::ptrdiff_t>(N)) - row);
    }
  }
  const int pw = map.width() * kCell, ph = map.height() * kCell;
  const int W = 2 * pw + kGap + 2 * kMargin;
  const int legend_rows = static_cast<int>((N + 7) / 8);
  const int H = ph + 2 * kMargin + 20 + 22 * legend_rows;
  std::ostringstream os;
  os << header(W, H);
  for (int carrying = 0; carrying < 2; ++carrying) {
    Panel p{kMargin + carrying * (pw + kGap), kMargin + 10, map};
    grid(os, p, carrying ? "with passenger" : "without passenger");
    for (int c = 0; c < cells; ++c) {
      const int s = carrying * cells + c;
      if (act[s] < 0) continue;
      const envs::Cell cell = map.cell_at(c);
      glyph(os, p.px(cell.col) + kCell / 2, p.py(cell.row) + kCell / 2, act[s],
            option_color(static_cast<std::size_t>(opt[s]), N));
    }
    decorations(os, p);
  }
  for (std::size_t w = 0; w < N; ++w) {
    const int x = kMargin + static_cast<int>(w % 8) * 60;
    const int y = kMargin + ph + 26 + static_cast<int>(w / 8) * 22;
    os << "<g class=\"legend\"><rect x=\"" << x << "\" y=\"" << y << "\" width=\"14\" height=\"14\" fill=\""
       << option_color(w, N) << "\"/><text x=\"" << x + 18 << "\" y=\"" << y + 12 << "\" font-size=\"12\">o" << w
       << "</text></g>\n";
  }
  os << "</svg>\n";
  return os.str();
}

std::vector<std::string> render_term_maps(const policy::HierParams& params, const envs::TaxiMap& map) {
  const std::size_t N = params.dims.N, A = params.dims.A;
  const int cells = map.cell_count();
  const int pw = map.width() * kCell, ph = map.height() * kCell;
  const int W = 4 * pw + 3 * kGap + 2 * kMargin;
  const int H = ph + 2 * kMargin + 50;
  std::vector<std::string> out;
  std::vector<double> probs(A);
  for (std::size_t w = 0; w < N; ++w) {
    std::ostringstream os;
    os << header(W, H);
    for (int carrying = 0; carrying < 2; ++carrying) {
      Panel heat{kMargin + carrying * (pw + kGap), kMargin + 10, map};
      Panel acts{kMargin + (2 + carrying) * (pw + kGap), kMargin + 10, map};
      const std::string tag = carrying ? "with passenger" : "without passenger";
      for (int c = 0; c < cells; ++c) {
        const std::size_t s = static_cast<std::size_t>(carrying * cells + c);
        const envs::Cell cell = map.cell_at(c);
        os << "<rect x=\"" << heat.px(cell.col) << "\" y=\"" << heat.py(cell.row) << "\" width=\"" << kCell
           << "\" height=\"" << kCell << "\" fill=\"" << term_color(policy::termination_value(params, w, s))
           << "\"/>\n";
        policy::action_probs(params, w, s, probs);
        const int best = static_cast<int>(std::max_element(probs.begin(), probs.end()) - probs.begin());
        glyph(os, acts.px(cell.col) + kCell / 2, acts.py(cell.row) + kCell / 2, best, "#333333");
      }
      grid(os, heat, "option " + std::to_string(w) + " termination, " + tag);
      grid(os, acts, "option " + std::to_string(w) + " actions, " + tag);
      decorations(os, heat);
      decorations(os, acts);
    }
    // 0..1 scale
    const int y = kMargin + ph + 24;
    for (int i = 0; i <= 10; ++i)
      os << "<rect x=\"" << kMargin + i * 20 << "\" y=\"" << y << "\" width=\"20\" height=\"12\" fill=\""
         << term_color(i / 10.0) << "\" stroke=\"#999999\"/>\n";
    os << "<text x=\"" << kMargin << "\" y=\"" << y + 26 << "\" font-size=\"11\">0</text><text x=\""
       << kMargin + 210 << "\" y=\"" << y + 26 << "\" font-size=\"11\">1</text>\n";
    os << "</svg>\n";
    out.push_back(os.str());
  }
  return out;
}

}  // namespace famp::harness
